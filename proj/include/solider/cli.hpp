#pragma once

// Command-line front end: gen-data, pretrain, finetune, extract, analyze.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid argument or unknown
// subcommand, 3 unknown flag, 4 missing required flag, 5 config error.
// Failures print exactly one line to stderr: "error[<kind>]: <message>".

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "solider/analysis.hpp"
#include "solider/checkpoint.hpp"
#include "solider/config.hpp"
#include "solider/data.hpp"
#include "solider/trainer.hpp"

#ifndef SOLIDER_VERSION
#define SOLIDER_VERSION "0.1.0-dev"
#endif

namespace solider::cli {

enum ExitCode : int { ok = 0, runtime_failure = 1, invalid_argument = 2, unknown_flag = 3, missing_flag = 4, config_error = 5 };

struct CliError : std::runtime_error {
    CliError(int code, std::string kind, const std::string& what) : std::runtime_error(what), code(code), kind(std::move(kind)) {}
    int code;
    std::string kind;
};

inline constexpr const char* kSubcommands[] = {"gen-data", "pretrain", "finetune", "extract", "analyze"};

/// Defaults, then SOLIDER_SEED, then the config file, then --set and
/// dedicated flags.
struct ConfigSources {
    std::string file;
    std::vector<std::string> overrides;  // key=value
    std::optional<std::uint64_t> seed;
};

inline Config resolve_config(const ConfigSources& src) {
    Config c;
    if (const char* env = std::getenv("SOLIDER_SEED"); env && *env) c.set("seed", env);
    if (!src.file.empty()) c.merge_file(src.file);
    for (const auto& kv : src.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
        c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (src.seed) c.set("seed", std::to_string(*src.seed));
    c.integer("seed");
    return c;
}

/// Writes the resolved configuration and code version beside an output.
inline void write_provenance(const std::filesystem::path& output, const Config& c) {
    std::ofstream out(output.string() + ".config");
    out << "# solider " << SOLIDER_VERSION << "\n" << c.serialize();
}

inline Dataset load_or_generate(const std::string& data_dir, const Config& c, const NormStats* norm) {
    if (!data_dir.empty()) {
        auto ds = ingest_images(data_dir, c.count("data.image_h"), c.count("data.image_w"), norm);
        if (ds.size() == 0) throw std::runtime_error("no readable images in " + data_dir);
        return ds;
    }
    const auto corpus = gen_synthetic_corpus(synthetic_spec_from(c), static_cast<std::uint64_t>(c.integer("seed")));
    return make_dataset(corpus, norm);
}

inline std::vector<double> parse_lambdas(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size()) throw CliError(invalid_argument, "invalid_argument", "bad lambda value '" + item + "'");
        ControlValue check(v);
        out.push_back(check.value());
    }
    if (out.empty()) throw CliError(invalid_argument, "invalid_argument", "empty lambda list");
    return out;
}

inline void log_epoch(std::ostream& log, const EpochReport& e) {
    std::ostringstream os;
    os.precision(6);
    os << phase_name(e.phase) << " epoch " << e.epoch << ": l_dino=" << e.l_dino << " l_sm=" << e.l_sm << " total=" << e.total
       << " mean_lambda=" << e.mean_lambda << " degenerate=" << e.degenerate_count << '\n';
    log << os.str() << std::flush;
}

inline int cmd_gen_data(const ConfigSources& src, const std::string& out_dir, bool overlays, std::ostream& log) {
    const Config c = resolve_config(src);
    const auto spec = synthetic_spec_from(c);
    const auto corpus = gen_synthetic_corpus(spec, static_cast<std::uint64_t>(c.integer("seed")));
    write_corpus(out_dir, corpus, overlays);
    write_provenance(std::filesystem::path(out_dir) / "corpus", c);
    log << "wrote " << corpus.images.size() << " images to " << out_dir << '\n';
    return ok;
}

inline int cmd_pretrain(const ConfigSources& src, const std::string& data_dir, const std::string& out, const std::string& metrics_path,
                        std::ostream& log) {
    const Config c = resolve_config(src);
    const TrainConfig cfg = train_config_from(c);
    const Dataset ds = load_or_generate(data_dir, c, nullptr);
    std::ofstream metrics;
    if (!metrics_path.empty()) metrics.open(metrics_path);
    auto st = pretrain_dino(cfg, ds, metrics_path.empty() ? nullptr : &metrics,
                            [&](const TrainState&, const EpochReport& e) { log_epoch(log, e); });
    checkpoint_save(st, out);
    write_provenance(out, c);
    return ok;
}

inline int cmd_finetune(const ConfigSources& src, const std::string& from, const std::string& data_dir, const std::string& out,
                        const std::string& metrics_path, std::ostream& log) {
    const auto table = read_checkpoint_table(from);
    // The checkpoint's own configuration is the base; the file and flags
    // override it.
    Config c = checkpoint_config(table);
    if (!src.file.empty()) c.merge_file(src.file);
    for (const auto& kv : src.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
        c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (src.seed) c.set("seed", std::to_string(*src.seed));
    const TrainConfig cfg = train_config_from(c);
    TrainState st = state_from_table(table, cfg);
    const Dataset ds = load_or_generate(data_dir, c, &st.norm);
    std::ofstream metrics;
    if (!metrics_path.empty()) metrics.open(metrics_path);
    st = finetune_solider(std::move(st), ds, metrics_path.empty() ? nullptr : &metrics,
                          [&](const TrainState&, const EpochReport& e) { log_epoch(log, e); });
    checkpoint_save(st, out);
    write_provenance(out, c);
    return ok;
}

/// Features file: "SOLFEAT1", u32 n, c, h, w, f64 lambda, per image u32
/// name length and name, then n*c*h*w float32 values in (n, c, h, w) order.
inline void write_features(const std::filesystem::path& path, const FeatureBank& bank, const std::vector<std::string>& names) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    auto u32 = [&](std::size_t v) {
        const auto x = static_cast<std::uint32_t>(v);
        out.write(reinterpret_cast<const char*>(&x), 4);
    };
    out.write("SOLFEAT1", 8);
    u32(bank.count);
    u32(bank.channels);
    u32(bank.height);
    u32(bank.width);
    out.write(reinterpret_cast<const char*>(&bank.lambda), 8);
    for (const auto& n : names) {
        u32(n.size());
        out.write(n.data(), static_cast<std::streamsize>(n.size()));
    }
    const std::size_t hw = bank.height * bank.width;
    std::vector<float> plane(bank.channels * hw);
    for (std::size_t i = 0; i < bank.count; ++i) {
        for (std::size_t t = 0; t < hw; ++t)
            for (std::size_t k = 0; k < bank.channels; ++k) plane[k * hw + t] = bank.token(i, t)[k];
        out.write(reinterpret_cast<const char*>(plane.data()), static_cast<std::streamsize>(plane.size() * sizeof(float)));
    }
}

inline int cmd_extract(const std::string& ckpt, double lambda, const std::string& images, const std::string& out, std::ostream& log) {
    const ControlValue lam(lambda);
    const auto table = read_checkpoint_table(ckpt);
    const Config c = checkpoint_config(table);
    const TrainState st = state_from_table(table, train_config_from(c));
    const Dataset ds = ingest_images(images, c.count("data.image_h"), c.count("data.image_w"), &st.norm);
    if (ds.size() == 0) throw std::runtime_error("no readable images in " + images);
    const auto bank = extract_features(st.student.backbone, ds, lam);
    write_features(out, bank, ds.names);
    write_provenance(out, c);
    log << "extracted " << ds.size() << " feature maps (" << ds.skipped << " skipped) to " << out << '\n';
    return ok;
}

inline int cmd_analyze(const std::string& ckpt, const std::string& data_dir, const std::string& lambdas, const std::string& out,
                       const std::string& labels, bool probes, const std::string& parts_csv, std::ostream& log) {
    const auto grid = parse_lambdas(lambdas);
    if (labels != "ground_truth" && labels != "pseudo")
        throw CliError(invalid_argument, "invalid_argument", "labels must be ground_truth or pseudo, got '" + labels + "'");
    const auto table = read_checkpoint_table(ckpt);
    Config c = checkpoint_config(table);
    c.set("analysis.labels", labels);
    c.set("analysis.probes", probes ? "true" : "false");
    const TrainConfig cfg = train_config_from(c);
    const TrainState st = state_from_table(table, cfg);
    const Dataset ds = load_or_generate(data_dir, c, &st.norm);
    SweepOptions opt;
    opt.labels = labels == "pseudo" ? LabelSource::pseudo : LabelSource::ground_truth;
    opt.probes = probes;
    opt.seed = cfg.seed;
    opt.labeler = cfg.labeler;
    const auto rows = lambda_sweep(st.student.backbone, ds, grid, opt);
    {
        std::ofstream csv(out);
        if (!csv) throw std::runtime_error("cannot write " + out);
        write_sweep_csv(csv, rows);
    }
    if (!parts_csv.empty()) {
        std::ofstream pcsv(parts_csv);
        for (double lam : grid) {
            const auto bank = extract_features(st.student.backbone, ds, ControlValue(lam));
            const auto lm = opt.labels == LabelSource::pseudo ? pseudo_labels(bank, opt.seed, opt.labeler) : ground_truth_labels(ds);
            std::ostringstream block;
            write_part_features_csv(block, build_part_features(bank, lm), lam);
            std::string text = block.str();
            if (lam != grid.front()) text = text.substr(text.find('\n') + 1);
            pcsv << text;
        }
    }
    std::vector<double> intra, inter;
    for (const auto& r : rows) {
        intra.push_back(r.intra);
        inter.push_back(r.inter);
    }
    if (grid.size() >= 2)
        log << "spearman(intra, lambda)=" << spearman(grid, intra) << " spearman(inter, lambda)=" << spearman(grid, inter) << '\n';
    write_provenance(out, c);
    return ok;
}

inline std::string one_line(std::string s) {
    for (auto& ch : s)
        if (ch == '\n' || ch == '\r') ch = ' ';
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
}

/// Parses argv and runs one subcommand. Never throws.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    auto fail = [&](int code, const std::string& kind, const std::string& msg) {
        err << "error[" << kind << "]: " << one_line(msg) << '\n';
        return code;
    };

    CLI::App app{"Semantic-controllable self-supervised person representation learning at desk scale", "solider"};
    app.set_version_flag("--version", std::string(SOLIDER_VERSION));
    app.require_subcommand(1);

    ConfigSources src;
    std::string out_path, data_dir, from, ckpt, images, lambdas = "0,0.25,0.5,0.75,1", labels = "ground_truth", metrics, parts_csv;
    std::string spec_file;
    std::uint64_t seed = 0;
    double lambda = 0.0;
    bool overlays = false, no_probes = false;

    // Required options are checked after parsing so an unknown flag is
    // reported as such even when a required one is also missing.
    std::vector<std::pair<CLI::App*, CLI::Option*>> required;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", src.file, "flat key = value config file")->check(CLI::ExistingFile);
        sub->add_option("--set", src.overrides, "override one config key (key=value); repeatable");
        sub->add_option("--seed", seed, "global seed (overrides config and SOLIDER_SEED)");
    };

    auto* gen = app.add_subcommand("gen-data", "write the synthetic figure corpus with ground-truth labels");
    gen->add_option("--spec", spec_file, "config file holding data.* keys")->check(CLI::ExistingFile);
    gen->add_option("--set", src.overrides, "override one config key (key=value); repeatable");
    gen->add_option("--seed", seed, "corpus seed");
    required.emplace_back(gen, gen->add_option("--out", out_path, "output directory (required)"));
    gen->add_flag("--overlays", overlays, "also write label overlay PNGs");

    auto* pre = app.add_subcommand("pretrain", "phase 1: self-distillation with frozen controllers");
    add_config(pre);
    pre->add_option("--data", data_dir, "image directory (default: synthetic corpus from the config)");
    required.emplace_back(pre, pre->add_option("--out", out_path, "checkpoint to write (required)"));
    pre->add_option("--metrics", metrics, "per-step metrics CSV");

    auto* fin = app.add_subcommand("finetune", "phase 2: lambda-conditioned semantic fine-tuning");
    add_config(fin);
    required.emplace_back(fin, fin->add_option("--from", from, "phase-1 checkpoint (required)")->check(CLI::ExistingFile));
    fin->add_option("--data", data_dir, "image directory (default: synthetic corpus from the config)");
    required.emplace_back(fin, fin->add_option("--out", out_path, "checkpoint to write (required)"));
    fin->add_option("--metrics", metrics, "per-step metrics CSV");

    auto* ext = app.add_subcommand("extract", "write backbone feature maps at a given lambda");
    required.emplace_back(ext, ext->add_option("--ckpt", ckpt, "checkpoint (required)")->check(CLI::ExistingFile));
    required.emplace_back(ext, ext->add_option("--lambda", lambda, "semantic ratio in [0,1] (required)"));
    required.emplace_back(ext, ext->add_option("--images", images, "image directory (required)")->check(CLI::ExistingDirectory));
    required.emplace_back(ext, ext->add_option("--out", out_path, "features file (required)"));

    auto* ana = app.add_subcommand("analyze", "part distance and probe sweep over lambda");
    required.emplace_back(ana, ana->add_option("--ckpt", ckpt, "checkpoint (required)")->check(CLI::ExistingFile));
    ana->add_option("--data", data_dir, "corpus directory (default: synthetic corpus from the checkpoint config)");
    ana->add_option("--lambdas", lambdas, "comma-separated lambda grid")->capture_default_str();
    required.emplace_back(ana, ana->add_option("--out", out_path, "report CSV (required)"));
    ana->add_option("--labels", labels, "ground_truth or pseudo")->capture_default_str();
    ana->add_flag("--no-probes", no_probes, "skip the linear probes");
    ana->add_option("--part-features", parts_csv, "also export part features as CSV");

    if (argc > 1) {
        const std::string first = argv[1];
        bool known = first.starts_with("-");
        for (const char* s : kSubcommands) known = known || first == s;
        if (!known) return fail(invalid_argument, "unknown_subcommand", "unknown subcommand '" + first + "'");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return ok;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return ok;
    } catch (const CLI::CallForVersion&) {
        out << SOLIDER_VERSION << '\n';
        return ok;
    } catch (const CLI::ExtrasError& e) {
        return fail(unknown_flag, "unknown_flag", e.what());
    } catch (const CLI::RequiredError& e) {
        return fail(missing_flag, "missing_flag", e.what());
    } catch (const CLI::ParseError& e) {
        return fail(invalid_argument, "invalid_argument", e.what());
    }

    for (const auto& [sub, opt] : required)
        if (sub->parsed() && opt->count() == 0) return fail(missing_flag, "missing_flag", opt->get_name() + " is required");

    const bool seed_given = [&] {
        for (auto* sub : {gen, pre, fin})
            if (sub->parsed() && sub->count("--seed")) return true;
        return false;
    }();
    if (seed_given) src.seed = seed;

    try {
        if (gen->parsed()) {
            src.file = spec_file;
            return cmd_gen_data(src, out_path, overlays, out);
        }
        if (pre->parsed()) return cmd_pretrain(src, data_dir, out_path, metrics, out);
        if (fin->parsed()) return cmd_finetune(src, from, data_dir, out_path, metrics, out);
        if (ext->parsed()) return cmd_extract(ckpt, lambda, images, out_path, out);
        if (ana->parsed()) return cmd_analyze(ckpt, data_dir, lambdas, out_path, labels, !no_probes, parts_csv, out);
    } catch (const CliError& e) {
        return fail(e.code, e.kind, e.what());
    } catch (const ConfigError& e) {
        return fail(config_error, "config", e.what());
    } catch (const std::out_of_range& e) {
        return fail(invalid_argument, "invalid_argument", e.what());
    } catch (const std::invalid_argument& e) {
        return fail(invalid_argument, "invalid_argument", e.what());
    } catch (const std::exception& e) {
        return fail(runtime_failure, "runtime", e.what());
    }
    return fail(invalid_argument, "unknown_subcommand", "no subcommand given");
}

}  // namespace solider::cli
