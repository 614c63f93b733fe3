// banet: audit, gradient checks, toy training/evaluation, CKA export and ablations.
//
// Exit codes: 0 success, 1 a check failed (or training diverged), 2 usage error.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "banet/audit.hpp"
#include "banet/suites.hpp"

namespace {

using namespace banet;

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

// Thrown for bad flag values discovered after parsing.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void write_output(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
}

// Flags shared by train, evaluate, cka and ablate. Unset flags leave config values alone.
struct ModelFlags {
    std::string config, model, attn, pooling, sources, integration, optimizer, dataset, checkpoint;
    std::optional<std::size_t> r, classes, epochs, batch_size, samples, size, dct_k;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    bool bypass = false;

    void add(CLI::App* app, bool training) {
        app->add_option("--config", config, "JSON config (TrainConfig field names)");
        app->add_option("--model", model, "toy2 | toy3 | toy4 | transformer");
        app->add_option("--attn", attn, "none | se | bav1 | bav2");
        app->add_option("--r", r, "reduction ratio");
        app->add_option("--pool", pooling, "avg | avg_max | avg_std | dct");
        app->add_option("--dct-k", dct_k, "DCT components");
        app->add_option("--bridge", sources, "bridge taps joined by '+', e.g. curr_conv1+adjacent");
        app->add_option("--variant", integration, "transformer integration: ba_mlp | se_mlp | ba_block | ba_stage");
        app->add_option("--classes", classes, "number of classes");
        app->add_option("--dataset", dataset, "'synthetic' or a CIFAR-10 binary file/directory");
        app->add_option("--synth-samples", samples, "synthetic sample count");
        app->add_option("--size", size, "synthetic image side");
        app->add_option("--seed", seed, "seed for data, init and shuffling");
        app->add_flag("--bypass", bypass, "force attention weights to 1");
        if (training) {
            app->add_option("--optimizer", optimizer, "sgd | adam");
            app->add_option("--lr", lr, "learning rate");
            app->add_option("--epochs", epochs, "epochs");
            app->add_option("--batch-size", batch_size, "batch size");
        }
    }

    TrainConfig resolve(TrainConfig c = {}) const {
        try {
            if (!config.empty()) {
                std::ifstream f(config);
                if (!f) throw UsageError("cannot open config " + config);
                c = train_config_from_json(nlohmann::json::parse(f), c);
            }
            nlohmann::json j = nlohmann::json::object();
            if (!model.empty()) j["model"] = model;
            if (!attn.empty()) j["attention"] = attn;
            if (r) j["reduction"] = *r;
            if (!pooling.empty()) j["pooling"] = pooling;
            if (dct_k) j["dct_components"] = *dct_k;
            if (!sources.empty()) j["sources"] = sources;
            if (!integration.empty()) j["integration"] = integration;
            if (classes) j["classes"] = *classes;
            if (!optimizer.empty()) j["optimizer"] = optimizer;
            if (lr) j["lr"] = *lr;
            if (epochs) j["epochs"] = *epochs;
            if (batch_size) j["batch_size"] = *batch_size;
            if (seed) j["seed"] = *seed;
            if (bypass) j["bypass_attention"] = true;
            if (!dataset.empty()) j["dataset"] = dataset;
            if (samples) j["synth_samples"] = *samples;
            if (size) j["synth_size"] = *size;
            if (!checkpoint.empty()) j["checkpoint"] = checkpoint;
            c = train_config_from_json(j, c);
            if (c.dataset != "synthetic" && !classes) c.model.classes = 10;
            c.validate();
            return c;
        } catch (const UsageError&) {
            throw;
        } catch (const nlohmann::json::exception& e) {
            throw UsageError(std::string("config: ") + e.what());
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
};

int cmd_audit(const std::string& arch, const std::string& attn, std::size_t r, const std::string& out,
              const std::string& reference, bool table) {
    std::vector<audit::ReferenceCell> refs =
        audit::load_reference_table(reference.empty() ? audit::default_reference_path() : std::filesystem::path(reference));
    if (table) {
        bool ok = true;
        std::ostringstream os;
        os << "arch,attention,params,params_ref_m,params_delta_pct,flops,flops_ref_g,flops_delta_pct,status\n";
        for (const auto& cell : refs) {
            const auto report = audit::audit_report(audit::build_arch(cell.backbone, parse_attention_kind(cell.variant), r), refs);
            ok = ok && report.pass();
            os << std::fixed << std::setprecision(3) << cell.backbone << ',' << cell.variant << ',' << report.params_total
               << ',' << cell.params_millions << ',' << report.params_delta_pct << ',' << report.flops_total << ','
               << cell.flops_g << ',' << report.flops_delta_pct << ',' << (report.pass() ? "PASS" : "FAIL") << '\n';
        }
        write_output(out, os.str());
        return ok ? kOk : kCheckFailed;
    }
    AttentionKind kind;
    audit::ArchSpec spec;
    try {
        kind = parse_attention_kind(attn);
        spec = audit::build_arch(arch, kind, r);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const auto report = audit::audit_report(spec, refs);
    write_output(out, audit::to_json(report).dump(2) + "\n");
    if (!out.empty() && out != "-") {
        std::cerr << spec.name << " + " << to_string(kind) << ": " << report.params_total << " params, "
                  << report.flops_total << " FLOPs";
        if (report.reference) std::cerr << " -> " << (report.pass() ? "PASS" : "FAIL");
        std::cerr << '\n';
    }
    return !report.reference || report.pass() ? kOk : kCheckFailed;
}

int cmd_gradcheck(const std::string& suite, std::uint64_t seed, double eps) {
    std::vector<CheckRecord> records;
    try {
        records = run_gradcheck_suite(suite, seed, eps);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    bool ok = true;
    std::cout << "suite,check,max_rel_error,threshold,coords,worst,analytic,numeric,status\n";
    for (const auto& r : records) {
        ok = ok && r.pass();
        std::cout << r.suite << ',' << r.name << ',' << std::scientific << std::setprecision(3) << r.max_rel_error << ','
                  << r.threshold << ',' << r.coords << ',' << r.worst << ',' << r.analytic << ',' << r.numeric << ','
                  << (r.pass() ? "PASS" : "FAIL") << '\n';
    }
    return ok ? kOk : kCheckFailed;
}

template <typename T>
int run_training(const TrainConfig& cfg, const std::string& log_path) {
    std::ofstream log_file;
    if (!log_path.empty()) {
        log_file.open(log_path);
        if (!log_file) throw std::runtime_error("cannot write " + log_path);
    }
    std::ostream& log = log_path.empty() ? std::cout : log_file;
    log << "epoch,loss,acc\n" << std::setprecision(9);
    try {
        const TrainResult r = train<T>(cfg, [&log](const EpochMetrics& m) {
            log << m.epoch << ',' << m.loss << ',' << m.accuracy << '\n' << std::flush;
        });
        log << "final," << r.epochs.back().loss << ',' << r.final_accuracy << '\n';
        if (!cfg.checkpoint.empty()) {
            std::ofstream meta(cfg.checkpoint + ".json");
            meta << to_json(cfg).dump(2) << '\n';
        }
        return kOk;
    } catch (const DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << '\n';
        return kCheckFailed;
    }
}

int cmd_train(const ModelFlags& flags, const std::string& log_path) {
    const TrainConfig cfg = flags.resolve();
    return training_precision() == 64 ? run_training<double>(cfg, log_path) : run_training<float>(cfg, log_path);
}

int cmd_evaluate(ModelFlags flags, const std::string& checkpoint) {
    TrainConfig base;
    const std::string meta = checkpoint + ".json";
    if (flags.config.empty() && std::filesystem::exists(meta)) flags.config = meta;
    TrainConfig cfg = flags.resolve(base);
    cfg.checkpoint.clear();
    ModelConfig mc = cfg.model;
    mc.seed = cfg.seed;
    auto model = make_model<double>(mc);
    if (!checkpoint.empty()) load_checkpoint(*model, checkpoint);
    const Dataset data = load_dataset(cfg);
    const double acc = evaluate(*model, data, 64, ForwardOptions{Mode::eval, cfg.bypass_attention});
    std::cout << "samples," << data.size() << "\naccuracy," << std::setprecision(9) << acc << '\n';
    return kOk;
}

int cmd_cka(const ModelFlags& flags, std::size_t m, const std::string& checkpoint, const std::string& out) {
    TrainConfig cfg = flags.resolve();
    if (!flags.samples && cfg.dataset == "synthetic") cfg.synth_samples = std::max(cfg.synth_samples, m);
    ModelConfig mc = cfg.model;
    mc.seed = cfg.seed;
    auto model = make_model<double>(mc);
    if (!checkpoint.empty()) load_checkpoint(*model, checkpoint);
    const Dataset data = load_dataset(cfg);
    cka::CkaMatrix matrix;
    try {
        matrix = importance_matrix(*model, data, m);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    write_output(out, matrix.to_csv());
    for (const auto& row : matrix.scores) {
        for (double v : row) {
            if (!(v >= 0.0 && v <= 1.0)) return kCheckFailed;
        }
    }
    return kOk;
}

int cmd_ablate(const ModelFlags& flags, bool pooling, bool sources, bool integration, const std::string& out) {
    if (pooling + sources + integration != 1) throw UsageError("ablate needs exactly one of --pooling, --sources, --integration");
    TrainConfig base;
    base.epochs = 3;
    const TrainConfig cfg = flags.resolve(base);
    AblationTable t = pooling ? ablate_pooling(cfg) : sources ? ablate_sources(cfg.seed) : ablate_integration(cfg);
    write_output(out, t.to_csv());
    return t.ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bridge attention toolkit: audit, gradcheck, train, evaluate, cka, ablate"};
    app.require_subcommand(1);

    auto* audit_cmd = app.add_subcommand("audit", "parameter/FLOP audit of an ImageNet ResNet");
    std::string arch = "resnet50", attn = "bav2", audit_out, reference;
    std::size_t r = 16;
    bool table = false;
    audit_cmd->add_option("--arch", arch, "resnet18 | resnet34 | resnet50 | resnet101");
    audit_cmd->add_option("--attn", attn, "none | se | bav1 | bav2");
    audit_cmd->add_option("--r", r, "reduction ratio")->check(CLI::PositiveNumber);
    audit_cmd->add_option("--out", audit_out, "write the JSON report here (default stdout)");
    audit_cmd->add_option("--reference", reference, "reference table CSV");
    audit_cmd->add_flag("--table", table, "audit every reference cell and print a CSV summary");

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suites");
    std::string suite = "all";
    std::uint64_t grad_seed = 0;
    grad_cmd->add_option("--suite", suite, "all | ops | attention | blocks | transformer");
    grad_cmd->add_option("--seed", grad_seed, "seed");
    double grad_eps = 1e-6;
    grad_cmd->add_option("--eps", grad_eps, "central-difference step")->check(CLI::PositiveNumber);

    auto* train_cmd = app.add_subcommand("train", "train a toy model; prints epoch,loss,acc");
    ModelFlags train_flags;
    std::string log_path;
    train_flags.add(train_cmd, true);
    train_cmd->add_option("--checkpoint", train_flags.checkpoint, "save weights here after training");
    train_cmd->add_option("--log", log_path, "write the metrics log here (default stdout)");

    auto* eval_cmd = app.add_subcommand("evaluate", "top-1 accuracy of a (checkpointed) toy model");
    ModelFlags eval_flags;
    std::string eval_ckpt;
    eval_flags.add(eval_cmd, false);
    eval_cmd->add_option("--checkpoint", eval_ckpt, "weights saved by train");

    auto* cka_cmd = app.add_subcommand("cka", "CKA between squeezed features and attention weights");
    ModelFlags cka_flags;
    std::size_t cka_samples = 128;
    std::string cka_ckpt, cka_out;
    cka_flags.add(cka_cmd, false);
    cka_cmd->add_option("--samples", cka_samples, "m, the number of samples");
    cka_cmd->add_option("--checkpoint", cka_ckpt, "weights saved by train (default: untrained seeded model)");
    cka_cmd->add_option("--out", cka_out, "CSV output (default stdout)");

    auto* ablate_cmd = app.add_subcommand("ablate", "pooling, bridge-source or integration ablations");
    ModelFlags ablate_flags;
    bool ab_pool = false, ab_sources = false, ab_integ = false;
    std::string ablate_out;
    ablate_flags.add(ablate_cmd, true);
    ablate_cmd->add_flag("--pooling", ab_pool, "the four pooling strategies");
    ablate_cmd->add_flag("--sources", ab_sources, "the six bridge-source configurations");
    ablate_cmd->add_flag("--integration", ab_integ, "the transformer integration variants");
    ablate_cmd->add_option("--out", ablate_out, "CSV output (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*audit_cmd) return cmd_audit(arch, attn, r, audit_out, reference, table);
        if (*grad_cmd) return cmd_gradcheck(suite, grad_seed, grad_eps);
        if (*train_cmd) return cmd_train(train_flags, log_path);
        if (*eval_cmd) return cmd_evaluate(eval_flags, eval_ckpt);
        if (*cka_cmd) return cmd_cka(cka_flags, cka_samples, cka_ckpt, cka_out);
        if (*ablate_cmd) return cmd_ablate(ablate_flags, ab_pool, ab_sources, ab_integ, ablate_out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kCheckFailed;
    }
    return kUsage;
}
