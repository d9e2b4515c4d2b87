// SPDX-License-Identifier: Apache-2.0
//
// tgr: command-line driver for datasets, zoo training, attacks and reports.
//
// Every command that writes files also writes a JSON run manifest (default
// <out>.manifest.json) listing its arguments, seeds and the CRC32 of every
// input and output. `tgr replay --manifest m.json` re-runs the command and
// fails unless every output is byte-identical.
//
// Failures print one line `tgr: error[<kind>]: <message>` to stderr and exit
// with the code of that kind (see ExitCode).

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tgr/tgr.hpp"

namespace fs = std::filesystem;
namespace io = tgr::io;
using io::IoError;
using nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "1.0.0";

enum ExitCode : int {
    kOk = 0,
    kInternal = 1,
    kUsage = 2,
    kConfig = 3,
    kIo = 4,
    kRefused = 5,
    kDomain = 6,
    kTraining = 7,
    kVerify = 8,
};

struct VerifyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string one_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

int fail(const char* kind, const std::string& msg, int code) {
    std::cerr << "tgr: error[" << kind << "]: " << one_line(msg) << '\n';
    return code;
}

std::string hex32(std::uint32_t v) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

class Manifest {
public:
    Manifest(std::string command, std::vector<std::string> args)
        : command_(std::move(command)), args_(std::move(args)), start_(std::chrono::steady_clock::now()) {}

    void config_file(const std::string& flag, const std::string& path) {
        config_files_[flag] = {{"path", path}, {"crc32", hex32(io::file_crc32(path))}};
    }
    void seed(const std::string& name, std::uint64_t v) { seeds_[name] = v; }
    void input(const std::string& path) { inputs_.push_back({{"path", path}, {"crc32", hex32(io::file_crc32(path))}}); }
    void output(const std::string& path) {
        const auto crc = hex32(io::file_crc32(path));
        outputs_.push_back({{"path", path}, {"crc32", crc}});
        std::cout << "wrote " << path << " crc32=" << crc << '\n';
    }
    void set(const std::string& key, ordered_json v) { extra_[key] = std::move(v); }

    void write(const std::string& path, std::size_t threads) const {
        ordered_json j;
        j["schema"] = "tgr-manifest";
        j["version"] = 1;
        j["tool_version"] = kToolVersion;
        j["command"] = command_;
        j["args"] = args_;
        j["config_files"] = config_files_.empty() ? ordered_json::object() : config_files_;
        j["seeds"] = seeds_.empty() ? ordered_json::object() : seeds_;
        j["threads"] = threads;
        j["inputs"] = inputs_.empty() ? ordered_json::array() : inputs_;
        j["outputs"] = outputs_.empty() ? ordered_json::array() : outputs_;
        for (const auto& [k, v] : extra_.items()) j[k] = v;
        j["duration_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        const std::string text = j.dump(2) + "\n";
        io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    }

private:
    std::string command_;
    std::vector<std::string> args_;
    ordered_json config_files_ = ordered_json::object();
    ordered_json seeds_ = ordered_json::object();
    ordered_json inputs_ = ordered_json::array();
    ordered_json outputs_ = ordered_json::array();
    ordered_json extra_ = ordered_json::object();
    std::chrono::steady_clock::time_point start_;
};

void write_text(const std::string& path, const std::string& text) {
    io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void require_writable(const std::vector<std::string>& outs, bool force) {
    for (const auto& o : outs) {
        if (fs::exists(o) && !force) throw IoError(o + " exists; pass --force to overwrite");
        const fs::path parent = fs::path(o).parent_path();
        if (!parent.empty() && !fs::is_directory(parent)) throw IoError("directory " + parent.string() + " does not exist");
    }
}

void require_file(const std::string& p, const char* what) {
    if (!fs::is_regular_file(p)) throw IoError(std::string(what) + " " + p + " not found");
}

tgr::Dataset load_data(const std::string& p, Manifest& m) {
    require_file(p, "dataset");
    m.input(p);
    auto d = tgr::load_dataset(p);
    d.validate();
    return d;
}

tgr::NamedModel load_named(const std::string& p, Manifest& m) {
    require_file(p, "model");
    m.input(p);
    return {fs::path(p).stem().string(), tgr::load_model(p)};
}

tgr::AttackConfig resolve_attack(const std::string& path, const std::vector<std::string>& sets, tgr::AttackConfig base,
                                 Manifest& m, const std::string& flag = "attack-config") {
    tgr::config::KeyValues kvs;
    if (!path.empty()) {
        require_file(path, "config");
        m.config_file(flag, path);
        kvs = tgr::config::read_kv_file(path);
    }
    for (const auto& s : sets) kvs.push_back(tgr::config::split_override(s));
    return tgr::config::attack_config_from_kv(kvs, std::move(base));
}

struct Common {
    std::size_t threads = tgr::default_threads();
    bool force = false;
    std::string manifest;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--threads", c.threads, "worker threads (default: TGR_THREADS or all cores)")
        ->check(CLI::PositiveNumber);
    sub->add_flag("--force", c.force, "overwrite existing outputs");
    sub->add_option("--manifest", c.manifest, "manifest path (default: <out>.manifest.json)");
}

std::string manifest_path(const Common& c, const std::string& primary) {
    return c.manifest.empty() ? primary + ".manifest.json" : c.manifest;
}

// Report outputs share a prefix: <out>.json, <out>.txt and optionally <out>.csv.
struct ReportPaths {
    std::string json, txt, csv;
    explicit ReportPaths(const std::string& prefix) : json(prefix + ".json"), txt(prefix + ".txt"), csv(prefix + ".csv") {}
};

tgr::HarnessOptions harness_options(const Common& c, double min_acc, std::size_t max_samples) {
    tgr::HarnessOptions o;
    o.threads = c.threads;
    o.min_clean_accuracy = min_acc;
    o.max_samples = max_samples;
    return o;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct Cli {
    CLI::App app{"Token-gradient-regularized transfer attacks on small vision transformers", "tgr"};
    Common common;
    std::vector<std::string> args;  // as given, without the program name
    std::function<int()> action;

    // gen-data
    std::size_t classes = 10, per_class = 200, size = 32;
    std::uint64_t seed = 1;
    std::string split = "train";
    std::string out;

    // train
    std::string data, eval_data, arch, train_config;
    std::optional<std::uint64_t> train_seed;
    std::vector<std::string> sets;

    // attack / eval / harness
    std::string source_model, attack_config, adversarials, source_name, attack_name;
    std::vector<std::string> targets, models, attack_configs;
    std::size_t max_samples = 0, samples = 100;
    double min_accuracy = tgr::kMinCleanAccuracy;
    std::vector<std::size_t> k_values{0, 1, 2, 3, 4, 5};

    std::string replay_manifest;

    Cli() {
        app.require_subcommand(1);
        app.set_version_flag("--version", kToolVersion);

        auto* g = app.add_subcommand("gen-data", "generate a synthetic dataset file");
        g->add_option("--classes", classes, "number of classes")->check(CLI::Range(2, 20));
        g->add_option("--per-class", per_class, "images per class")->check(CLI::PositiveNumber);
        g->add_option("--size", size, "image side in pixels")->check(CLI::Range(8, 1024));
        g->add_option("--seed", seed, "generator seed");
        g->add_option("--split", split, "train or eval stream")->check(CLI::IsMember({"train", "eval"}));
        g->add_option("--out", out, "output dataset file")->required();
        add_common(g, common);
        g->callback([this] { action = [this] { return gen_data(); }; });

        auto* t = app.add_subcommand("train", "train one zoo architecture");
        t->add_option("--data", data, "training dataset file")->required();
        t->add_option("--eval-data", eval_data, "held-out dataset for the accuracy line");
        t->add_option("--arch", arch, "zoo architecture name")->required();
        t->add_option("--train-config", train_config, "train config file (key = value)");
        t->add_option("--set", sets, "override a config key (key=value)");
        t->add_option("--seed", train_seed, "batch shuffle seed");
        t->add_option("--out", out, "output model file")->required();
        add_common(t, common);
        t->callback([this] { action = [this] { return train(); }; });

        auto* a = app.add_subcommand("attack", "craft adversarials on a source model");
        a->add_option("--source-model", source_model, "source model file")->required();
        a->add_option("--data", data, "clean dataset file")->required();
        a->add_option("--attack-config", attack_config, "attack config file (default: MIM)");
        a->add_option("--set", sets, "override a config key (key=value)");
        a->add_option("--max-samples", max_samples, "cap on source-correct samples (0 = all)");
        a->add_option("--out", out, "output adversarial batch (dataset format)")->required();
        add_common(a, common);
        a->callback([this] { action = [this] { return attack(); }; });

        auto* e = app.add_subcommand("eval", "attack success rates of an adversarial batch");
        e->add_option("--adversarials", adversarials, "adversarial batch file")->required();
        e->add_option("--targets", targets, "target model files")->required();
        e->add_option("--source", source_name, "source model name (white-box column)");
        e->add_option("--attack-config", attack_config, "config the batch was crafted with");
        e->add_option("--attack-name", attack_name, "row label");
        e->add_option("--out", out, "report prefix")->required();
        add_common(e, common);
        e->callback([this] { action = [this] { return eval(); }; });

        auto* v = app.add_subcommand("variance", "per-block gradient variance profiles");
        v->add_option("--models", models, "model files")->required();
        v->add_option("--data", data, "clean dataset file")->required();
        v->add_option("--attack-config", attack_configs, "attack config files (default: MIM and TGR)");
        v->add_option("--samples", samples, "samples per profile")->check(CLI::PositiveNumber);
        v->add_option("--min-accuracy", min_accuracy, "clean accuracy gate in percent");
        v->add_option("--out", out, "report prefix")->required();
        add_common(v, common);
        v->callback([this] { action = [this] { return variance(); }; });

        for (const char* name : {"ablate", "sweep-k"}) {
            const bool ablate = std::string_view(name) == "ablate";
            auto* s = app.add_subcommand(name, ablate ? "component ablation over the 8 subsets"
                                                      : "sweep the extreme-token count k");
            s->add_option("--source-model", source_model, "source model file")->required();
            s->add_option("--targets", targets, "target model files");
            s->add_option("--data", data, "clean dataset file")->required();
            s->add_option("--attack-config", attack_config, "base TGR config file (default: TGR)");
            s->add_option("--set", sets, "override a config key (key=value)");
            s->add_option("--max-samples", max_samples, "cap on source-correct samples (0 = all)");
            s->add_option("--min-accuracy", min_accuracy, "clean accuracy gate in percent");
            if (!ablate) s->add_option("--k", k_values, "k values")->delimiter(',');
            s->add_option("--out", out, "report prefix")->required();
            add_common(s, common);
            if (ablate) s->callback([this] { action = [this] { return ablate_cmd(); }; });
            else s->callback([this] { action = [this] { return sweep_cmd(); }; });
        }

        auto* r = app.add_subcommand("replay", "re-run a manifest and verify byte-identical outputs");
        r->add_option("--manifest", replay_manifest, "manifest file")->required();
        r->callback([this] { action = [this] { return replay(); }; });
    }

    std::string command() const { return app.get_subcommands().front()->get_name(); }

    int gen_data() {
        require_writable({out}, common.force);
        Manifest m(command(), args);
        m.seed("seed", seed);
        const auto d = tgr::generate_synthetic(classes, per_class, size, seed,
                                               split == "eval" ? tgr::Split::Eval : tgr::Split::Train);
        tgr::save_dataset(d, out);
        std::cout << "generated " << d.size() << " images (" << classes << " classes, " << size << "x" << size
                  << ", " << split << " split)\n";
        m.output(out);
        m.write(manifest_path(common, out), common.threads);
        return kOk;
    }

    int train() {
        require_writable({out}, common.force);
        Manifest m(command(), args);
        const auto zoo = tgr::default_zoo();
        const auto* entry = tgr::find_arch(zoo, arch);
        if (!entry) {
            std::string names;
            for (const auto& z : zoo) names += (names.empty() ? "" : ", ") + z.name;
            throw tgr::ConfigError("unknown --arch `" + arch + "`; available: " + names);
        }
        tgr::config::KeyValues kvs;
        if (!train_config.empty()) {
            require_file(train_config, "config");
            m.config_file("train-config", train_config);
            kvs = tgr::config::read_kv_file(train_config);
        }
        for (const auto& s : sets) kvs.push_back(tgr::config::split_override(s));
        tgr::TrainConfig cfg = tgr::train_config_from_kv(kvs);
        if (train_seed) cfg.seed = *train_seed;
        cfg.validate();
        m.seed("seed", cfg.seed);
        m.seed("init_seed", cfg.init_seed);
        m.set("train_config", tgr::to_text(cfg));

        const auto train_set = load_data(data, m);
        std::optional<tgr::Dataset> eval_set;
        if (!eval_data.empty()) eval_set = load_data(eval_data, m);

        auto res = tgr::train(tgr::ViTModel::random(entry->config, cfg.init_seed), train_set, cfg,
                              eval_set ? &*eval_set : nullptr, common.threads);
        for (const auto& h : res.history) {
            std::cout << "epoch " << h.epoch << " loss " << h.train_loss << " train_acc " << h.train_accuracy;
            if (h.eval_accuracy) std::cout << " eval_acc " << *h.eval_accuracy;
            std::cout << '\n';
        }
        tgr::save_model(res.model, out);
        const auto& last = res.history.back();
        std::cout << std::fixed << std::setprecision(2);
        if (last.eval_accuracy) std::cout << "eval accuracy: " << *last.eval_accuracy << "%\n";
        else std::cout << "train accuracy: " << tgr::accuracy(res.model, train_set, common.threads) << "%\n";
        std::cout << std::defaultfloat;
        m.set("final_eval_accuracy", last.eval_accuracy ? ordered_json(*last.eval_accuracy) : ordered_json(nullptr));
        m.output(out);
        m.write(manifest_path(common, out), common.threads);
        return kOk;
    }

    int attack() {
        require_writable({out}, common.force);
        Manifest m(command(), args);
        const auto src = load_named(source_model, m);
        const auto clean = load_data(data, m);
        tgr::check_compatible(src.model, clean);
        const auto cfg = resolve_attack(attack_config, sets, tgr::mim_attack_config(), m);
        cfg.validate(src.model.config());
        m.seed("seed", cfg.seed);
        if (cfg.patchout) m.seed("patchout.rng_seed", cfg.patchout->rng_seed);
        m.set("attack_config", tgr::config::to_text(cfg));

        const auto eval = tgr::source_correct_subset(src.model, clean, max_samples, common.threads);
        if (eval.empty()) throw tgr::DomainError("source model classifies no sample of " + data + " correctly");
        const auto adv = tgr::label_adversarials(tgr::generate_adversarials(src.model, eval, cfg, common.threads), eval);

        const auto box = tgr::check_box(adv, eval);
        if (box.max_linf > cfg.epsilon_unit() + 1e-12 || box.range_violations)
            throw VerifyError("adversarial batch violates the L-inf box: max |x_adv - x| = " +
                              tgr::config::fmt_double(box.max_linf) + ", " + std::to_string(box.range_violations) +
                              " pixels out of range");

        tgr::Dataset batch = eval;
        for (std::size_t i = 0; i < adv.size(); ++i) batch.images[i] = adv[i].image;
        tgr::save_dataset(batch, out);
        const double wb = tgr::attack_success_rate(src.model, adv, common.threads);
        std::cout << "attack " << cfg.name << " on " << src.name << ": " << adv.size()
                  << " source-correct samples, white-box ASR " << tgr::report::pct(wb) << "%, max L-inf "
                  << box.max_linf * tgr::kPixelScale << "/255\n";
        m.set("sample_count", adv.size());
        m.set("white_box_asr", wb);
        m.output(out);
        m.write(manifest_path(common, out), common.threads);
        return kOk;
    }

    int eval() {
        const ReportPaths rp(out);
        require_writable({rp.json, rp.txt, rp.csv}, common.force);
        Manifest m(command(), args);
        const auto batch = load_data(adversarials, m);
        tgr::Zoo zoo;
        for (const auto& t : targets) zoo.push_back(load_named(t, m));
        tgr::AttackConfig cfg;
        if (!attack_config.empty()) cfg = resolve_attack(attack_config, {}, {}, m);
        if (!attack_name.empty()) cfg.name = attack_name;
        else if (attack_config.empty()) cfg.name = fs::path(adversarials).stem().string();
        if (batch.empty()) throw tgr::DomainError("adversarial batch " + adversarials + " is empty");

        std::vector<tgr::LabeledImage> adv;
        for (std::size_t i = 0; i < batch.size(); ++i) adv.push_back({batch.images[i], batch.labels[i]});
        for (const auto& t : zoo) tgr::check_compatible(t.model, batch);
        const auto rep = tgr::evaluate_transfer(zoo, source_name, cfg, adv, common.threads);
        const std::vector<tgr::TransferReport> reps{rep};
        write_text(rp.json, tgr::report::transfer_json(reps));
        write_text(rp.txt, tgr::report::transfer_table(reps));
        write_text(rp.csv, tgr::report::transfer_csv(reps));
        std::cout << tgr::report::transfer_table(reps);
        m.output(rp.json);
        m.output(rp.txt);
        m.output(rp.csv);
        m.write(manifest_path(common, rp.json), common.threads);
        return kOk;
    }

    int variance() {
        const ReportPaths rp(out);
        require_writable({rp.json, rp.txt}, common.force);
        Manifest m(command(), args);
        const auto clean = load_data(data, m);
        tgr::Zoo zoo;
        for (const auto& p : models) zoo.push_back(load_named(p, m));
        std::vector<tgr::AttackConfig> cfgs;
        if (attack_configs.empty()) cfgs = {tgr::mim_attack_config(), tgr::tgr_attack_config()};
        for (std::size_t i = 0; i < attack_configs.size(); ++i)
            cfgs.push_back(resolve_attack(attack_configs[i], {}, {}, m, "attack-config." + std::to_string(i)));
        tgr::require_trained(zoo, clean, harness_options(common, min_accuracy, 0));
        std::vector<tgr::VarianceProfile> profiles;
        for (const auto& nm : zoo) {
            tgr::check_compatible(nm.model, clean);
            for (const auto& c : cfgs)
                profiles.push_back(tgr::variance_profile(nm.model, c, clean, samples, common.threads, nm.name));
        }
        write_text(rp.json, tgr::report::variance_json(profiles));
        write_text(rp.txt, tgr::report::variance_table(profiles));
        std::cout << tgr::report::variance_table(profiles);
        m.output(rp.json);
        m.output(rp.txt);
        m.write(manifest_path(common, rp.json), common.threads);
        return kOk;
    }

    // Source first, then targets in the given order, duplicates dropped.
    tgr::Zoo load_zoo(Manifest& m, std::string& src_name) {
        tgr::Zoo zoo;
        zoo.push_back(load_named(source_model, m));
        src_name = zoo.front().name;
        for (const auto& t : targets) {
            if (fs::weakly_canonical(t) == fs::weakly_canonical(source_model)) continue;
            zoo.push_back(load_named(t, m));
        }
        return zoo;
    }

    int ablate_cmd() {
        const ReportPaths rp(out);
        require_writable({rp.json, rp.txt}, common.force);
        Manifest m(command(), args);
        std::string src;
        const auto zoo = load_zoo(m, src);
        const auto clean = load_data(data, m);
        const auto base = resolve_attack(attack_config, sets, tgr::tgr_attack_config(), m);
        m.set("attack_config", tgr::config::to_text(base));
        const auto t = tgr::ablate_components(zoo, src, clean, base, harness_options(common, min_accuracy, max_samples));
        write_text(rp.json, tgr::report::ablation_json(t));
        write_text(rp.txt, tgr::report::ablation_table(t));
        std::cout << tgr::report::ablation_table(t);
        m.output(rp.json);
        m.output(rp.txt);
        m.write(manifest_path(common, rp.json), common.threads);
        return kOk;
    }

    int sweep_cmd() {
        const ReportPaths rp(out);
        require_writable({rp.json, rp.txt, rp.csv}, common.force);
        Manifest m(command(), args);
        std::string src;
        const auto zoo = load_zoo(m, src);
        const auto clean = load_data(data, m);
        const auto base = resolve_attack(attack_config, sets, tgr::tgr_attack_config(), m);
        m.set("attack_config", tgr::config::to_text(base));
        const auto t = tgr::sweep_k(zoo, src, clean, k_values, base, harness_options(common, min_accuracy, max_samples));
        write_text(rp.json, tgr::report::sweep_json(t));
        write_text(rp.txt, tgr::report::sweep_table(t));
        write_text(rp.csv, tgr::report::sweep_csv(t));
        std::cout << tgr::report::sweep_table(t);
        m.output(rp.json);
        m.output(rp.txt);
        m.output(rp.csv);
        m.write(manifest_path(common, rp.json), common.threads);
        return kOk;
    }

    int replay();
};

int run(std::vector<std::string> args);

int Cli::replay() {
    require_file(replay_manifest, "manifest");
    const auto bytes = io::read_file(replay_manifest);
    ordered_json j;
    try {
        j = ordered_json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw tgr::ParseError(replay_manifest + ": " + e.what());
    }
    if (j.value("schema", "") != "tgr-manifest") throw tgr::ParseError(replay_manifest + ": not a tgr manifest");
    if (j.value("tool_version", "") != kToolVersion)
        throw VerifyError("manifest was written by tool version " + j.value("tool_version", "?") + ", this is " +
                          kToolVersion);
    auto check = [](const ordered_json& entry, const char* what) {
        const std::string p = entry.at("path");
        if (!fs::is_regular_file(p)) throw IoError(std::string(what) + " " + p + " not found");
        const auto crc = hex32(io::file_crc32(p));
        if (crc != entry.at("crc32").get<std::string>())
            throw VerifyError(std::string(what) + " " + p + " has crc32 " + crc + ", manifest records " +
                              entry.at("crc32").get<std::string>());
    };
    for (const auto& in : j.at("inputs")) check(in, "input");
    for (const auto& [flag, cf] : j.at("config_files").items()) check(cf, "config");

    std::vector<std::string> rerun = j.at("args").get<std::vector<std::string>>();
    if (std::find(rerun.begin(), rerun.end(), "--force") == rerun.end()) rerun.push_back("--force");
    if (const int rc = run(rerun); rc != kOk) return rc;
    for (const auto& o : j.at("outputs")) check(o, "output");
    std::cout << "replay: " << j.at("outputs").size() << " outputs byte-identical\n";
    return kOk;
}

int run(std::vector<std::string> args) {
    Cli cli;
    cli.args = args;
    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        cli.app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        return cli.app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return cli.app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return cli.app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), kUsage);
    }
    try {
        return cli.action();
    } catch (const tgr::RefusalError& e) {
        return fail("refused", e.what(), kRefused);
    } catch (const tgr::TrainingError& e) {
        return fail("training", e.what(), kTraining);
    } catch (const VerifyError& e) {
        return fail("verify", e.what(), kVerify);
    } catch (const tgr::ParseError& e) {
        return fail("parse", e.what(), kIo);
    } catch (const IoError& e) {
        return fail("io", e.what(), kIo);
    } catch (const fs::filesystem_error& e) {
        return fail("io", e.what(), kIo);
    } catch (const tgr::ConfigError& e) {
        return fail("config", e.what(), kConfig);
    } catch (const tgr::DimensionError& e) {
        return fail("dimension", e.what(), kDomain);
    } catch (const tgr::DomainError& e) {
        return fail("domain", e.what(), kDomain);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), kInternal);
    }
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(std::move(args));
}
