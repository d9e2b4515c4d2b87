// SPDX-License-Identifier: Apache-2.0
//
// Evaluation harness: transfer-attack success matrices, per-block gradient
// variance profiles, component ablations and the extreme-token sweep.

#pragma once

#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tgr/attack.hpp"
#include "tgr/config.hpp"
#include "tgr/io.hpp"
#include "tgr/parallel.hpp"
#include "tgr/zoo.hpp"

namespace tgr {

struct RefusalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kReportSchemaVersion = 1;

// Clean eval accuracy every model must reach before it is attacked.
inline constexpr double kMinCleanAccuracy = 95.0;

struct NamedModel {
    std::string name;
    ViTModel model;
};

using Zoo = std::vector<NamedModel>;

inline const NamedModel& find_model(const Zoo& zoo, std::string_view name) {
    for (const auto& m : zoo)
        if (m.name == name) return m;
    throw ConfigError("unknown model `" + std::string(name) + "`");
}

struct LabeledImage {
    Tensor image;
    std::size_t label;
};

struct HarnessOptions {
    double min_clean_accuracy = kMinCleanAccuracy;
    std::size_t max_samples = 0;  // 0 = every source-correct sample
    std::size_t threads = 1;
    const Dataset* gate_data = nullptr;  // accuracy gate set; the eval data when null
};

// ---------------------------------------------------------------------------
// Primitive measurements
// ---------------------------------------------------------------------------

inline double attack_success_rate(const ViTModel& target, std::span<const LabeledImage> adversarials,
                                  std::size_t threads = 1) {
    if (adversarials.empty()) throw DomainError("attack_success_rate: no adversarial samples");
    std::vector<std::uint8_t> fooled(adversarials.size());
    parallel_for(adversarials.size(), threads, [&](std::size_t i) {
        fooled[i] = predict(target, adversarials[i].image) != adversarials[i].label;
    });
    std::size_t n = 0;
    for (auto f : fooled) n += f;
    return 100.0 * static_cast<double>(n) / static_cast<double>(adversarials.size());
}

// Samples the model classifies correctly, in dataset order, at most `limit`
// of them (0 = no limit).
inline Dataset source_correct_subset(const ViTModel& model, const Dataset& data, std::size_t limit = 0,
                                     std::size_t threads = 1) {
    std::vector<std::uint8_t> ok(data.size());
    parallel_for(data.size(), threads, [&](std::size_t i) { ok[i] = predict(model, data.images[i]) == data.labels[i]; });
    Dataset out = data;
    out.images.clear();
    out.labels.clear();
    for (std::size_t i = 0; i < data.size() && (limit == 0 || out.size() < limit); ++i)
        if (ok[i]) {
            out.images.push_back(data.images[i]);
            out.labels.push_back(data.labels[i]);
        }
    return out;
}

// Runs attack() on every sample; sample i uses seed cfg.seed ^ i.
inline std::vector<AdversarialResult> generate_adversarials(const ViTModel& source, const Dataset& data,
                                                            const AttackConfig& cfg, std::size_t threads = 1) {
    cfg.validate(source.config());
    std::vector<AdversarialResult> out(data.size());
    parallel_for(data.size(), threads, [&](std::size_t i) {
        AttackConfig c = cfg;
        c.seed = cfg.seed ^ static_cast<std::uint64_t>(i);
        out[i] = attack(source, data.images[i], data.labels[i], c);
    });
    return out;
}

inline std::vector<LabeledImage> label_adversarials(const std::vector<AdversarialResult>& adv, const Dataset& data) {
    std::vector<LabeledImage> out;
    out.reserve(adv.size());
    for (std::size_t i = 0; i < adv.size(); ++i) out.push_back({adv[i].x_adv, data.labels[i]});
    return out;
}

// CRC32 over the concatenated f64 payloads.
inline std::uint32_t adversarial_checksum(std::span<const LabeledImage> adv) {
    io::Writer w;
    for (const auto& a : adv) {
        w.f64s(a.image.data());
        w.u16(static_cast<std::uint16_t>(a.label));
    }
    return io::crc32(w.buffer());
}

// Largest |x_adv - x| over all samples, and the number of pixels outside
// the valid range.
struct BoxCheck {
    double max_linf = 0.0;
    std::size_t range_violations = 0;
};

inline BoxCheck check_box(std::span<const LabeledImage> adv, const Dataset& clean) {
    BoxCheck b;
    for (std::size_t i = 0; i < adv.size(); ++i) {
        b.max_linf = std::max(b.max_linf, max_abs(adv[i].image - clean.images[i]));
        for (double v : adv[i].image.data()) b.range_violations += (v < kPixelMin || v > kPixelMax);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Transfer matrix
// ---------------------------------------------------------------------------

struct TransferReport {
    std::string source_model;
    std::string attack_name;
    std::vector<std::pair<std::string, double>> per_target;  // zoo order, source included
    std::size_t sample_count = 0;
    AttackConfig config;
    std::uint32_t adversarial_crc = 0;

    double asr(std::string_view target) const {
        for (const auto& [n, v] : per_target)
            if (n == target) return v;
        throw ConfigError("no ASR cell for target `" + std::string(target) + "`");
    }
    double white_box_asr() const { return asr(source_model); }
    // Mean over every target other than the source; NaN if there is none.
    double mean_black_box_asr() const {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& [name, v] : per_target)
            if (name != source_model) {
                s += v;
                ++n;
            }
        return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
    }
};

// Refuses models whose clean accuracy on `data` is below the threshold.
inline void require_trained(const Zoo& zoo, const Dataset& data, const HarnessOptions& opt) {
    if (opt.min_clean_accuracy <= 0.0) return;
    const Dataset& gate = opt.gate_data ? *opt.gate_data : data;
    for (const auto& m : zoo) {
        const double acc = accuracy(m.model, gate, opt.threads);
        if (acc < opt.min_clean_accuracy) {
            std::ostringstream os;
            os << "model `" << m.name << "` has clean accuracy " << std::fixed << std::setprecision(2) << acc
               << "% < required " << opt.min_clean_accuracy << "%; refusing to attack an untrained model";
            throw RefusalError(os.str());
        }
    }
}

// Adds a plain MIM row (same budget, TGR removed) unless one is present.
inline std::vector<AttackConfig> with_mim_baseline(std::vector<AttackConfig> attacks) {
    if (attacks.empty()) return {mim_attack_config()};
    for (const auto& a : attacks)
        if (!a.tgr) return attacks;
    AttackConfig mim = attacks.front();
    mim.tgr.reset();
    mim.name = mim.patchout ? "MIM-P" : "MIM";
    attacks.insert(attacks.begin(), mim);
    return attacks;
}

inline TransferReport evaluate_transfer(const Zoo& zoo, const std::string& source, const AttackConfig& cfg,
                                        std::span<const LabeledImage> adv, std::size_t threads) {
    TransferReport r;
    r.source_model = source;
    r.attack_name = cfg.name;
    r.sample_count = adv.size();
    r.config = cfg;
    r.adversarial_crc = adversarial_checksum(adv);
    for (const auto& m : zoo) r.per_target.emplace_back(m.name, attack_success_rate(m.model, adv, threads));
    return r;
}

struct TransferRun {
    TransferReport report;
    std::vector<LabeledImage> adversarials;
};

// Evaluation samples are the source-correct samples of `data`. Adversarials
// are generated once per attack config and scored on every zoo model.
inline std::vector<TransferRun> transfer_runs(const Zoo& zoo, const std::string& source,
                                              const std::vector<AttackConfig>& attacks, const Dataset& data,
                                              const HarnessOptions& opt = {}) {
    require_trained(zoo, data, opt);
    const ViTModel& src = find_model(zoo, source).model;
    const Dataset eval = source_correct_subset(src, data, opt.max_samples, opt.threads);
    if (eval.empty()) throw DomainError("transfer_matrix: the source model classifies no sample correctly");
    std::vector<TransferRun> runs;
    for (const auto& cfg : with_mim_baseline(attacks)) {
        auto adv = label_adversarials(generate_adversarials(src, eval, cfg, opt.threads), eval);
        TransferReport rep = evaluate_transfer(zoo, source, cfg, adv, opt.threads);
        runs.push_back({std::move(rep), std::move(adv)});
    }
    return runs;
}

inline std::vector<TransferReport> transfer_matrix(const Zoo& zoo, const std::string& source,
                                                   const std::vector<AttackConfig>& attacks, const Dataset& data,
                                                   const HarnessOptions& opt = {}) {
    std::vector<TransferReport> out;
    for (auto& r : transfer_runs(zoo, source, attacks, data, opt)) out.push_back(std::move(r.report));
    return out;
}

// ---------------------------------------------------------------------------
// Gradient variance profile
// ---------------------------------------------------------------------------

struct VarianceProfile {
    std::string model_name;
    std::string attack_name;
    std::vector<double> per_block;  // block 0 is nearest the input
    double shallow = 0.0, middle = 0.0, deep = 0.0;
    std::size_t sample_count = 0;

    double overall() const {
        double s = 0.0;
        for (double v : per_block) s += v;
        return per_block.empty() ? 0.0 : s / static_cast<double>(per_block.size());
    }
};

// Block ranges [0, a), [a, b), [b, L) with a = ceil(L/3), b = ceil(2L/3).
struct LevelSplit {
    std::size_t shallow_end, middle_end;
};

inline LevelSplit level_split(std::size_t depth) {
    return {(depth + 2) / 3, (2 * depth + 2) / 3};
}

inline void compute_level_averages(VarianceProfile& p) {
    const auto [a, b] = level_split(p.per_block.size());
    auto mean = [&](std::size_t lo, std::size_t hi) {
        if (hi <= lo) return 0.0;
        double s = 0.0;
        for (std::size_t i = lo; i < hi; ++i) s += p.per_block[i];
        return s / static_cast<double>(hi - lo);
    };
    p.shallow = mean(0, a);
    p.middle = mean(a, b);
    p.deep = mean(b, p.per_block.size());
}

// For each of the first `sample_count` samples, records the post-hook module
// gradients of the attack's final iteration, takes the population variance
// of each block's pooled (Attention, QKV, MLP) entries, and averages per
// block over samples.
inline VarianceProfile variance_profile(const ViTModel& model, const AttackConfig& attack_cfg, const Dataset& data,
                                        std::size_t sample_count = 100, std::size_t threads = 1,
                                        std::string model_name = {}) {
    if (sample_count == 0 || sample_count > data.size())
        throw DomainError("variance_profile: need " + std::to_string(sample_count) + " samples, dataset has " +
                          std::to_string(data.size()));
    if (attack_cfg.steps == 0) throw ConfigError("steps: variance profiling needs at least one iteration");
    attack_cfg.validate(model.config());
    const std::size_t L = model.config().depth;
    std::vector<std::vector<double>> per_sample(sample_count, std::vector<double>(L, 0.0));
    parallel_for(sample_count, threads, [&](std::size_t i) {
        AttackConfig c = attack_cfg;
        c.seed = attack_cfg.seed ^ static_cast<std::uint64_t>(i);
        attack(model, data.images[i], data.labels[i], c, [&](std::size_t step, const BackwardResult& bwd) {
            if (step + 1 != attack_cfg.steps) return;
            std::vector<std::vector<double>> pooled(L);
            for (const auto& mg : bwd.module_grads)
                pooled[mg.block_index].insert(pooled[mg.block_index].end(), mg.grad.data().begin(),
                                              mg.grad.data().end());
            for (std::size_t l = 0; l < L; ++l) per_sample[i][l] = moments(pooled[l]).variance;
        });
    });
    VarianceProfile p;
    p.model_name = std::move(model_name);
    p.attack_name = attack_cfg.name;
    p.sample_count = sample_count;
    p.per_block.assign(L, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t i = 0; i < sample_count; ++i) p.per_block[l] += per_sample[i][l];
        p.per_block[l] /= static_cast<double>(sample_count);
    }
    compute_level_averages(p);
    return p;
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

struct AblationRow {
    ComponentSet components;
    TransferReport report;
};

struct AblationTable {
    TransferReport mim;  // plain MIM reference
    std::vector<AblationRow> rows;
};

// One transfer run per subset of {Attention, QKV, MLP}, empty set first, in
// bitmask order (bit 0 Attention, bit 1 QKV, bit 2 MLP).
inline AblationTable ablate_components(const Zoo& zoo, const std::string& source, const Dataset& data,
                                       const AttackConfig& tgr_base = tgr_attack_config(),
                                       const HarnessOptions& opt = {}) {
    std::vector<AttackConfig> attacks;
    for (unsigned bits = 0; bits < 8; ++bits) {
        AttackConfig c = tgr_base;
        if (!c.tgr) c.tgr = TgrConfig{};
        c.tgr->enabled = ComponentSet::from_bits(bits);
        c.name = "TGR[" + c.tgr->enabled.str() + "]";
        attacks.push_back(c);
    }
    auto runs = transfer_runs(zoo, source, attacks, data, opt);
    AblationTable t{std::move(runs.front().report), {}};
    for (std::size_t i = 1; i < runs.size(); ++i)
        t.rows.push_back({runs[i].report.config.tgr->enabled, std::move(runs[i].report)});
    return t;
}

struct SweepRow {
    std::size_t k;
    TransferReport report;
};

struct SweepTable {
    TransferReport mim;
    std::vector<SweepRow> rows;
};

inline SweepTable sweep_k(const Zoo& zoo, const std::string& source, const Dataset& data,
                          const std::vector<std::size_t>& k_values = {0, 1, 2, 3, 4, 5},
                          const AttackConfig& tgr_base = tgr_attack_config(), const HarnessOptions& opt = {}) {
    const ViTModel& src = find_model(zoo, source).model;
    std::vector<AttackConfig> attacks;
    for (std::size_t k : k_values) {
        AttackConfig c = tgr_base;
        if (!c.tgr) c.tgr = TgrConfig{};
        c.tgr->k = k;
        // No tokens eliminated: the degenerate point, scaling included.
        if (k == 0) c.tgr->s_attention = c.tgr->s_qkv = c.tgr->s_mlp = 1.0;
        c.name = "TGR[k=" + std::to_string(k) + "]";
        c.validate(src.config());
        attacks.push_back(c);
    }
    auto runs = transfer_runs(zoo, source, attacks, data, opt);
    SweepTable t{std::move(runs.front().report), {}};
    for (std::size_t i = 1; i < runs.size(); ++i) t.rows.push_back({runs[i].report.config.tgr->k, std::move(runs[i].report)});
    return t;
}

// ---------------------------------------------------------------------------
// Report emission
//
// JSON documents carry {"schema": "tgr-report", "version": 1, "kind": ...}.
//   transfer: {"reports": [TransferReport...]}
//   variance: {"profiles": [VarianceProfile...]}
//   ablation: {"baseline": TransferReport,
//              "rows": [{"components": "...", "matches_baseline": bool, "report": TransferReport}...]}
//   sweep-k:  {"baseline": TransferReport,
//              "rows": [{"k": n, "matches_baseline": bool, "report": TransferReport}...]}
// "matches_baseline" compares the adversarial CRCs with the MIM run.
// TransferReport: {"source", "attack", "sample_count", "adversarial_crc32",
//   "asr": {target: percent}, "targets": [names in zoo order],
//   "mean_black_box_asr", "config": "<attack config text>"}
// ---------------------------------------------------------------------------

namespace report {

using nlohmann::ordered_json;

inline ordered_json header(const std::string& kind) {
    ordered_json j;
    j["schema"] = "tgr-report";
    j["version"] = kReportSchemaVersion;
    j["kind"] = kind;
    return j;
}

inline ordered_json to_json(const TransferReport& r) {
    ordered_json j;
    j["source"] = r.source_model;
    j["attack"] = r.attack_name;
    j["sample_count"] = r.sample_count;
    j["adversarial_crc32"] = r.adversarial_crc;
    ordered_json asr = ordered_json::object();
    ordered_json targets = ordered_json::array();
    for (const auto& [n, v] : r.per_target) {
        asr[n] = v;
        targets.push_back(n);
    }
    j["targets"] = targets;
    j["asr"] = asr;
    const double bb = r.mean_black_box_asr();
    j["mean_black_box_asr"] = std::isnan(bb) ? ordered_json(nullptr) : ordered_json(bb);
    j["config"] = config::to_text(r.config);
    return j;
}

inline ordered_json to_json(const VarianceProfile& p) {
    ordered_json j;
    j["model"] = p.model_name;
    j["attack"] = p.attack_name;
    j["sample_count"] = p.sample_count;
    j["per_block"] = p.per_block;
    j["shallow"] = p.shallow;
    j["middle"] = p.middle;
    j["deep"] = p.deep;
    j["average"] = p.overall();
    return j;
}

inline std::string transfer_json(const std::vector<TransferReport>& reports) {
    ordered_json j = header("transfer");
    j["reports"] = ordered_json::array();
    for (const auto& r : reports) j["reports"].push_back(to_json(r));
    return j.dump(2) + "\n";
}

inline std::string variance_json(const std::vector<VarianceProfile>& profiles) {
    ordered_json j = header("variance");
    j["profiles"] = ordered_json::array();
    for (const auto& p : profiles) j["profiles"].push_back(to_json(p));
    return j.dump(2) + "\n";
}

inline std::string ablation_json(const AblationTable& t) {
    ordered_json j = header("ablation");
    j["baseline"] = to_json(t.mim);
    j["rows"] = ordered_json::array();
    for (const auto& r : t.rows) {
        ordered_json row;
        row["components"] = r.components.str();
        row["matches_baseline"] = r.report.adversarial_crc == t.mim.adversarial_crc;
        row["report"] = to_json(r.report);
        j["rows"].push_back(std::move(row));
    }
    return j.dump(2) + "\n";
}

inline std::string sweep_json(const SweepTable& t) {
    ordered_json j = header("sweep-k");
    j["baseline"] = to_json(t.mim);
    j["rows"] = ordered_json::array();
    for (const auto& r : t.rows) {
        ordered_json row;
        row["k"] = r.k;
        row["matches_baseline"] = r.report.adversarial_crc == t.mim.adversarial_crc;
        row["report"] = to_json(r.report);
        j["rows"].push_back(std::move(row));
    }
    return j.dump(2) + "\n";
}

inline std::string pct(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << v;
    return os.str();
}

// Aligned text table: one row per report, one column per target, then the
// black-box mean. A '*' marks the white-box column.
inline std::string transfer_table(const std::vector<std::string>& row_labels,
                                  const std::vector<const TransferReport*>& reports) {
    if (reports.empty()) return {};
    std::vector<std::string> header{"Attack"};
    for (const auto& [n, v] : reports.front()->per_target)
        header.push_back(n == reports.front()->source_model ? n + "*" : n);
    header.push_back("BB-mean");
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        std::vector<std::string> row{row_labels[i]};
        for (const auto& [n, v] : reports[i]->per_target) row.push_back(pct(v));
        const double bb = reports[i]->mean_black_box_asr();
        row.push_back(std::isnan(bb) ? "-" : pct(bb));
        rows.push_back(std::move(row));
    }
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) {
        width[c] = header[c].size();
        for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
    }
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t c = 0; c < cells.size(); ++c) {
            if (c == 0) os << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
            else os << "  " << std::right << std::setw(static_cast<int>(width[c])) << cells[c];
        }
        os << '\n';
    };
    line(header);
    std::size_t total = 0;
    for (auto w : width) total += w + 2;
    os << std::string(total - 2, '-') << '\n';
    for (const auto& r : rows) line(r);
    return os.str();
}

inline std::string transfer_table(const std::vector<TransferReport>& reports) {
    std::vector<std::string> labels;
    std::vector<const TransferReport*> ptrs;
    for (const auto& r : reports) {
        labels.push_back(r.attack_name);
        ptrs.push_back(&r);
    }
    return "Source: " + (reports.empty() ? std::string() : reports.front().source_model) + " (ASR %)\n" +
           transfer_table(labels, ptrs);
}

inline std::string ablation_table(const AblationTable& t) {
    const auto& rows = t.rows;
    std::vector<std::string> labels{"MIM"};
    std::vector<const TransferReport*> ptrs{&t.mim};
    for (const auto& r : rows) {
        labels.push_back(r.components.str());
        ptrs.push_back(&r.report);
    }
    return "Component ablation, source " + t.mim.source_model +
           " (ASR %)\n" + transfer_table(labels, ptrs);
}

inline std::string sweep_table(const SweepTable& t) {
    const auto& rows = t.rows;
    std::vector<std::string> labels{"MIM"};
    std::vector<const TransferReport*> ptrs{&t.mim};
    for (const auto& r : rows) {
        labels.push_back("k=" + std::to_string(r.k));
        ptrs.push_back(&r.report);
    }
    return "Extreme-token sweep, source " + t.mim.source_model +
           " (ASR %)\n" + transfer_table(labels, ptrs);
}

inline std::string variance_table(const std::vector<VarianceProfile>& profiles) {
    std::ostringstream os;
    os << std::left << std::setw(16) << "Model" << std::setw(16) << "Attack" << std::right << std::setw(14)
       << "Deep" << std::setw(14) << "Middle" << std::setw(14) << "Shallow" << std::setw(14) << "Average" << '\n';
    os << std::string(88, '-') << '\n';
    for (const auto& p : profiles) {
        os << std::left << std::setw(16) << p.model_name << std::setw(16) << p.attack_name << std::right
           << std::scientific << std::setprecision(4) << std::setw(14) << p.deep << std::setw(14) << p.middle
           << std::setw(14) << p.shallow << std::setw(14) << p.overall() << std::defaultfloat << '\n';
    }
    return os.str();
}

inline std::string transfer_csv(const std::vector<TransferReport>& reports) {
    std::ostringstream os;
    os << "source,attack,target,asr,sample_count\n";
    for (const auto& r : reports)
        for (const auto& [n, v] : r.per_target)
            os << r.source_model << ',' << r.attack_name << ',' << n << ',' << config::fmt_double(v) << ','
               << r.sample_count << '\n';
    return os.str();
}

inline std::string sweep_csv(const SweepTable& t) {
    std::ostringstream os;
    os << "k,mean_black_box_asr,white_box_asr\n";
    for (const auto& r : t.rows)
        os << r.k << ',' << config::fmt_double(r.report.mean_black_box_asr()) << ','
           << config::fmt_double(r.report.white_box_asr()) << '\n';
    return os.str();
}

}  // namespace report

}  // namespace tgr
