// nilm-fusion: generate | train | eval | report
//
// Settings come from built-in defaults, then --config, then flags.
// Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric, 1 anything else.

#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "nilm/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string data_dir;
    std::string manifest;
    std::string out;
    std::string features;
    std::optional<int> epochs;
    std::optional<int> batch_size;
    std::optional<double> lr;
    std::optional<int> n_max;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "JSON run configuration");
    cmd->add_option("--seed", o.seed, "base seed");
    cmd->add_option("--data-dir", o.data_dir, "PLAID-style CSV directory (switches the source to plaid)");
    cmd->add_option("--manifest", o.manifest, "manifest for --data-dir (default <data-dir>/manifest.json)");
    cmd->add_option("--out", o.out, "run directory");
    cmd->add_option("--features", o.features, "icpc|ica|pca|fryze|fitps-flat")
        ->check(CLI::IsMember({"icpc", "ica", "pca", "fryze", "fitps-flat"}));
    cmd->add_option("--epochs", o.epochs, "training epochs");
    cmd->add_option("--batch-size", o.batch_size, "mini-batch size");
    cmd->add_option("--lr", o.lr, "Adam learning rate");
    cmd->add_option("--n-max", o.n_max, "largest number of simultaneously active appliances");
}

// `base` is the layer under the config file; train/eval start from the
// config the dataset was generated with, so a bare `train --out run`
// continues what generate made.
nilm::RunConfig resolve(const Overrides& o, const nlohmann::json& base = nlohmann::json::object()) {
    nlohmann::json layered = base;
    if (!o.config.empty()) {
        nlohmann::json file;
        try {
            file = nlohmann::json::parse(nilm::io::read_text(o.config));
        } catch (const nlohmann::json::parse_error& e) {
            throw nilm::InvalidArgument("config " + o.config + ": " + e.what());
        } catch (const std::runtime_error& e) {
            throw nilm::InvalidArgument(e.what());
        }
        layered.merge_patch(file);
    }
    nlohmann::json flags = nlohmann::json::object();
    if (o.seed) flags["seed"] = *o.seed;
    if (!o.data_dir.empty()) flags["data"] = {{"source", "plaid"}, {"plaid_dir", o.data_dir}};
    if (!o.manifest.empty()) flags["data"]["manifest"] = o.manifest;
    if (!o.out.empty()) flags["out"] = o.out;
    if (!o.features.empty()) flags["features"]["kind"] = o.features;
    if (o.epochs) flags["train"]["epochs"] = *o.epochs;
    if (o.batch_size) flags["train"]["batch_size"] = *o.batch_size;
    if (o.lr) flags["train"]["lr"] = *o.lr;
    if (o.n_max) flags["mix"]["n_max"] = *o.n_max;
    layered.merge_patch(flags);
    auto c = nilm::RunConfig::from_json(layered);
    c.validate();
    return c;
}

nlohmann::json dataset_config(const fs::path& dataset) {
    if (!fs::exists(dataset / "manifest.json")) return nlohmann::json::object();
    return nilm::read_manifest(dataset).at("config");
}

fs::path dataset_dir(const nilm::RunConfig& c, const std::string& flag) {
    return flag.empty() ? fs::path(c.out) / "dataset" : fs::path(flag);
}

void print_report(const nilm::MetricsReport& r) {
    std::printf("f1_mean %.6f over %zu samples\n", r.f1_mean, r.n_samples);
    for (std::size_t g = 0; g < r.per_k.k.size(); ++g)
        if (r.per_k.n_samples[g]) std::printf("  k=%-2d n=%-5zu f1 %.4f\n", r.per_k.k[g], r.per_k.n_samples[g], r.per_k.f1[g]);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-label appliance identification from aggregate current"};
    app.require_subcommand(1);
    Overrides o;
    std::string dataset_flag, split = "test", predictions, report_out;
    bool override_hash = false, resume = false;
    int stop_after = 0;

    auto* gen = app.add_subcommand("generate", "synthesise or load source recordings and write aggregate datasets");
    add_common(gen, o);

    auto* tr = app.add_subcommand("train", "fit the feature transform and the classifier");
    add_common(tr, o);
    tr->add_option("--dataset", dataset_flag, "dataset directory (default <out>/dataset)");
    tr->add_flag("--resume", resume, "continue from <out>/checkpoint.bin");
    tr->add_option("--stop-after-epoch", stop_after, "stop after this epoch; resume later with --resume");
    tr->add_flag("--override-hash-check", override_hash, "accept artifacts from a different config");

    auto* ev = app.add_subcommand("eval", "score a split with the best checkpoint");
    add_common(ev, o);
    ev->add_option("--dataset", dataset_flag, "dataset directory (default <out>/dataset)");
    ev->add_option("--split", split, "train|val|test")->check(CLI::IsMember({"train", "val", "test"}));
    ev->add_flag("--override-hash-check", override_hash, "accept artifacts from a different config");

    auto* rep = app.add_subcommand("report", "rebuild report files from a predictions file");
    rep->add_option("predictions", predictions, "predictions.json written by eval")->required();
    rep->add_option("--out", report_out, "output directory (default: beside the predictions)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            const auto c = resolve(o);
            const fs::path dir = fs::path(c.out) / "dataset";
            const auto m = nilm::run_generate(c, dir, nilm::worker_count());
            std::printf("wrote %s (config %s)\n", dir.c_str(), c.config_hash().c_str());
            for (const auto& s : nilm::kSplitNames)
                std::printf("  %-5s %zu aggregates\n", s.c_str(), m["splits"][s]["n_samples"].get<std::size_t>());
        } else if (tr->parsed()) {
            auto probe = resolve(o, nlohmann::json::object());
            const fs::path ds = dataset_dir(probe, dataset_flag);
            const auto c = resolve(o, dataset_config(ds));
            nilm::TrainControl ctl;
            ctl.resume = resume;
            ctl.stop_after_epoch = stop_after;
            ctl.override_hash_check = override_hash;
            ctl.on_epoch = [](const nilm::EpochRecord& r) {
                std::printf("epoch %3d  train bce %.4f f1 %.4f  val bce %.4f f1 %.4f\n", r.epoch, r.train_bce, r.train_f1,
                            r.val_bce, r.val_f1);
                std::fflush(stdout);
            };
            const auto res = nilm::run_train(c, ds, c.out, ctl);
            std::printf("best val f1 %.4f at epoch %d; %zu parameters\n", res.state.best_val_f1, res.state.best_epoch,
                        res.state.params.parameter_count());
        } else if (ev->parsed()) {
            auto probe = resolve(o, nlohmann::json::object());
            const fs::path ds = dataset_dir(probe, dataset_flag);
            const auto c = resolve(o, dataset_config(ds));
            const fs::path out = fs::path(c.out) / ("eval_" + split);
            print_report(nilm::run_eval(c, ds, c.out, out, split, override_hash));
            std::printf("wrote %s\n", out.c_str());
        } else if (rep->parsed()) {
            const fs::path out = report_out.empty() ? fs::path(predictions).parent_path() : fs::path(report_out);
            print_report(nilm::run_report(predictions, out));
        }
    } catch (const nilm::InvalidArgument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const nilm::Unsupported& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const nilm::InvalidState& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const nilm::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const nilm::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
