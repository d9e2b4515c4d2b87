// SPDX-License-Identifier: Apache-2.0
//
// Flat `key = value` config files. Lines starting with '#' and blank lines
// are ignored; unknown keys are rejected with the key in the message.
//
// Attack config keys:
//
//   name                  free-form label used in reports
//   epsilon               L-inf radius, 0-255 scale
//   steps                 iteration count T
//   alpha                 step size, 0-255 scale (default epsilon / steps)
//   mu                    momentum decay
//   seed                  u64, mixed into the PatchOut stream
//   patchout              on | off
//   patchout.num_patches  patches sampled per iteration (0 = ceil(0.66 N))
//   patchout.rng_seed     u64
//   tgr                   on | off
//   tgr.k                 extreme tokens per extremum
//   tgr.s_attention, tgr.s_qkv, tgr.s_mlp   scaling factors in [0, 1]
//   tgr.components        comma list of Attention, QKV, MLP, or "none"
//   tgr.class_token       on | off: rank the class-token row with the patch tokens
//   tgr.selection         signed | magnitude
//   tgr.elimination       per-channel | global-row
//
// Setting any patchout.* or tgr.* key switches that section on unless the
// section key is explicitly "off".

#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tgr/attack.hpp"

namespace tgr::config {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline KeyValues parse_kv(std::string_view text, const std::string& what = "config") {
    KeyValues out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        const auto line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(what + ":" + std::to_string(line_no) + ": expected `key = value`");
        std::string key = trim(std::string_view(t).substr(0, eq));
        std::string val = trim(std::string_view(t).substr(eq + 1));
        if (key.empty()) throw ConfigError(what + ":" + std::to_string(line_no) + ": empty key");
        out.emplace_back(std::move(key), std::move(val));
    }
    return out;
}

inline KeyValues read_kv_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot open config " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_kv(ss.str(), p.string());
}

// "key=value" as given on a command line.
inline std::pair<std::string, std::string> split_override(std::string_view s) {
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw ConfigError("override `" + std::string(s) + "` is not key=value");
    return {trim(s.substr(0, eq)), trim(s.substr(eq + 1))};
}

// Shortest representation that round-trips.
inline std::string fmt_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc{} || r.ptr != v.data() + v.size())
        throw ConfigError(key + ": `" + v + "` is not a number");
    return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc{} || r.ptr != v.data() + v.size())
        throw ConfigError(key + ": `" + v + "` is not a non-negative integer");
    return out;
}

inline bool parse_switch(const std::string& key, const std::string& v) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected on or off, got `" + v + "`");
}

inline ComponentSet parse_components(const std::string& key, const std::string& v) {
    ComponentSet s;
    if (v == "none" || v.empty()) return s;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item == "Attention") s.insert(Component::Attention);
        else if (item == "QKV") s.insert(Component::QKV);
        else if (item == "MLP") s.insert(Component::MLP);
        else throw ConfigError(key + ": unknown component `" + item + "`");
    }
    return s;
}

// Accumulates key/value pairs into an AttackConfig, tracking explicit
// section switches so that later keys do not re-enable a disabled section.
class AttackConfigBuilder {
public:
    explicit AttackConfigBuilder(AttackConfig base = {}) : cfg_(std::move(base)) {}

    void set(const std::string& key, const std::string& v) {
        if (key == "name") cfg_.name = v;
        else if (key == "epsilon") cfg_.epsilon = parse_double(key, v);
        else if (key == "steps") cfg_.steps = parse_u64(key, v);
        else if (key == "alpha") cfg_.alpha = parse_double(key, v);
        else if (key == "mu") cfg_.mu = parse_double(key, v);
        else if (key == "seed") cfg_.seed = parse_u64(key, v);
        else if (key == "patchout") {
            patchout_forced_ = true;
            if (parse_switch(key, v)) {
                if (!cfg_.patchout) cfg_.patchout = PatchOutConfig{};
            } else {
                cfg_.patchout.reset();
            }
        } else if (key.starts_with("patchout.")) {
            PatchOutConfig& p = patchout();
            if (key == "patchout.num_patches") p.num_patches = parse_u64(key, v);
            else if (key == "patchout.rng_seed") p.rng_seed = parse_u64(key, v);
            else unknown(key);
        } else if (key == "tgr") {
            tgr_forced_ = true;
            if (parse_switch(key, v)) {
                if (!cfg_.tgr) cfg_.tgr = TgrConfig{};
            } else {
                cfg_.tgr.reset();
            }
        } else if (key.starts_with("tgr.")) {
            TgrConfig& t = tgr();
            if (key == "tgr.k") t.k = parse_u64(key, v);
            else if (key == "tgr.s_attention") t.s_attention = parse_double(key, v);
            else if (key == "tgr.s_qkv") t.s_qkv = parse_double(key, v);
            else if (key == "tgr.s_mlp") t.s_mlp = parse_double(key, v);
            else if (key == "tgr.components") t.enabled = parse_components(key, v);
            else if (key == "tgr.selection") {
                if (v == "signed") t.selection = SelectionMode::SignedExtremes;
                else if (v == "magnitude") t.selection = SelectionMode::MagnitudeExtremes;
                else throw ConfigError(key + ": expected signed or magnitude, got `" + v + "`");
            } else if (key == "tgr.class_token") {
                t.class_token = parse_switch(key, v);
            } else if (key == "tgr.elimination") {
                if (v == "per-channel") t.elimination = EliminationMode::PerChannelEntry;
                else if (v == "global-row") t.elimination = EliminationMode::GlobalTokenRow;
                else throw ConfigError(key + ": expected per-channel or global-row, got `" + v + "`");
            } else {
                unknown(key);
            }
        } else {
            unknown(key);
        }
    }

    void set_all(const KeyValues& kvs) {
        for (const auto& [k, v] : kvs) set(k, v);
    }

    const AttackConfig& get() const noexcept { return cfg_; }

private:
    [[noreturn]] static void unknown(const std::string& key) { throw ConfigError(key + ": unknown key"); }

    // Sub-keys of a section that was explicitly switched off are still
    // validated but land in a scratch copy.
    PatchOutConfig& patchout() {
        if (!cfg_.patchout) {
            if (patchout_forced_) return scratch_patchout_;
            cfg_.patchout = PatchOutConfig{};
        }
        return *cfg_.patchout;
    }
    TgrConfig& tgr() {
        if (!cfg_.tgr) {
            if (tgr_forced_) return scratch_tgr_;
            cfg_.tgr = TgrConfig{};
        }
        return *cfg_.tgr;
    }

    AttackConfig cfg_;
    bool patchout_forced_ = false;
    bool tgr_forced_ = false;
    PatchOutConfig scratch_patchout_;
    TgrConfig scratch_tgr_;
};

inline AttackConfig attack_config_from_kv(const KeyValues& kvs, AttackConfig base = {}) {
    AttackConfigBuilder b(std::move(base));
    b.set_all(kvs);
    return b.get();
}

inline AttackConfig load_attack_config(const std::filesystem::path& p) { return attack_config_from_kv(read_kv_file(p)); }

inline std::string to_text(const AttackConfig& c) {
    std::ostringstream os;
    os << "# attack config\n";
    os << "name = " << c.name << '\n';
    os << "epsilon = " << fmt_double(c.epsilon) << '\n';
    os << "steps = " << c.steps << '\n';
    if (c.alpha) os << "alpha = " << fmt_double(*c.alpha) << '\n';
    os << "mu = " << fmt_double(c.mu) << '\n';
    os << "seed = " << c.seed << '\n';
    os << "patchout = " << (c.patchout ? "on" : "off") << '\n';
    if (c.patchout) {
        os << "patchout.num_patches = " << c.patchout->num_patches << '\n';
        os << "patchout.rng_seed = " << c.patchout->rng_seed << '\n';
    }
    os << "tgr = " << (c.tgr ? "on" : "off") << '\n';
    if (c.tgr) {
        const TgrConfig& t = *c.tgr;
        os << "tgr.k = " << t.k << '\n';
        os << "tgr.s_attention = " << fmt_double(t.s_attention) << '\n';
        os << "tgr.s_qkv = " << fmt_double(t.s_qkv) << '\n';
        os << "tgr.s_mlp = " << fmt_double(t.s_mlp) << '\n';
        os << "tgr.components = " << t.enabled.str() << '\n';
        os << "tgr.selection = " << (t.selection == SelectionMode::SignedExtremes ? "signed" : "magnitude") << '\n';
        os << "tgr.elimination = "
           << (t.elimination == EliminationMode::PerChannelEntry ? "per-channel" : "global-row") << '\n';
        os << "tgr.class_token = " << (t.class_token ? "on" : "off") << '\n';
    }
    return os.str();
}

}  // namespace tgr::config
