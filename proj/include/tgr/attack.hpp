// SPDX-License-Identifier: Apache-2.0
//
// Token Gradient Regularization and the momentum iterative attack it plugs
// into.
//
// During backward, each intercepted block gradient is first multiplied by a
// per-component scaling factor s; then the gradient entries belonging to the
// 2k extreme tokens are eliminated:
//
//   QKV / MLP [S x C]   per channel, zero the k largest and k smallest entries
//                       (PerChannelEntry), or zero the whole rows of the 2k
//                       tokens with extreme L1 row norm (GlobalTokenRow).
//   Attention [M x S x S] per head, locate the 2k extreme entries (r, c) and
//                       zero row r and column c of that head (PerChannelEntry),
//                       or locate them over all heads and zero row r and
//                       column c in every head (GlobalTokenRow).
//
// The regularized input gradient then drives MIM:
//   g_t    = mu g_{t-1} + grad / ||grad||_1
//   x_t+1  = clip(x_t + alpha sign(g_t), x - eps, x + eps, [0, 1])

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "tgr/tensor.hpp"
#include "tgr/vit.hpp"

namespace tgr {

inline constexpr double kPixelMin = 0.0;
inline constexpr double kPixelMax = 1.0;
inline constexpr double kPixelScale = 255.0;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class SelectionMode : std::uint8_t { SignedExtremes, MagnitudeExtremes };
enum class EliminationMode : std::uint8_t { PerChannelEntry, GlobalTokenRow };

class ComponentSet {
public:
    constexpr ComponentSet() = default;
    constexpr ComponentSet(std::initializer_list<Component> cs) {
        for (Component c : cs) insert(c);
    }
    static constexpr ComponentSet all() { return {Component::Attention, Component::QKV, Component::MLP}; }
    static constexpr ComponentSet from_bits(unsigned bits) {
        ComponentSet s;
        s.bits_ = static_cast<std::uint8_t>(bits & 7u);
        return s;
    }

    constexpr void insert(Component c) { bits_ |= bit(c); }
    constexpr bool contains(Component c) const { return (bits_ & bit(c)) != 0; }
    constexpr bool empty() const { return bits_ == 0; }
    constexpr unsigned bits() const { return bits_; }

    std::string str() const {
        if (empty()) return "none";
        std::string s;
        for (Component c : kAllComponents)
            if (contains(c)) s += (s.empty() ? "" : ",") + std::string(to_string(c));
        return s;
    }

    friend constexpr bool operator==(ComponentSet, ComponentSet) = default;

private:
    static constexpr std::uint8_t bit(Component c) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(c)); }
    std::uint8_t bits_ = 0;
};

struct TgrConfig {
    std::size_t k = 1;
    double s_attention = 0.25;
    double s_qkv = 0.75;
    double s_mlp = 0.25;
    ComponentSet enabled = ComponentSet::all();
    SelectionMode selection = SelectionMode::SignedExtremes;
    EliminationMode elimination = EliminationMode::PerChannelEntry;
    bool class_token = true;  // rank the class-token row along with the patch tokens

    double scale_for(Component c) const noexcept {
        switch (c) {
            case Component::Attention: return s_attention;
            case Component::QKV: return s_qkv;
            case Component::MLP: return s_mlp;
        }
        return 1.0;
    }

    // token_count is the sequence length S of the model the config targets.
    void validate(std::size_t token_count) const {
        if (2 * k >= token_count)
            throw ConfigError("tgr.k: 2k = " + std::to_string(2 * k) + " must be less than the token count " +
                              std::to_string(token_count));
        auto check_s = [](const char* key, double s) {
            if (!(s >= 0.0 && s <= 1.0)) throw ConfigError(std::string(key) + ": scaling factor must lie in [0, 1]");
        };
        check_s("tgr.s_attention", s_attention);
        check_s("tgr.s_qkv", s_qkv);
        check_s("tgr.s_mlp", s_mlp);
    }

    friend bool operator==(const TgrConfig&, const TgrConfig&) = default;
};

// Keeps the 130-of-196 sampling ratio at any token count.
inline std::size_t default_patchout_patches(std::size_t num_patches) {
    return static_cast<std::size_t>(std::ceil(0.66 * static_cast<double>(num_patches) - 1e-9));
}

struct PatchOutConfig {
    std::size_t num_patches = 0;  // 0 = default_patchout_patches(N)
    std::uint64_t rng_seed = 0;

    std::size_t count_for(std::size_t n) const noexcept { return num_patches ? num_patches : default_patchout_patches(n); }
    friend bool operator==(const PatchOutConfig&, const PatchOutConfig&) = default;
};

struct AttackConfig {
    std::string name = "MIM";
    double epsilon = 16.0;  // L-inf radius on the 0-255 pixel scale
    std::size_t steps = 10;
    std::optional<double> alpha;  // 0-255 scale; epsilon / steps when unset
    double mu = 1.0;
    std::optional<PatchOutConfig> patchout;
    std::optional<TgrConfig> tgr;
    std::uint64_t seed = 0;

    double epsilon_unit() const noexcept { return epsilon / kPixelScale; }
    double alpha_pixels() const noexcept {
        if (alpha) return *alpha;
        return steps == 0 ? 0.0 : epsilon / static_cast<double>(steps);
    }
    double alpha_unit() const noexcept { return alpha_pixels() / kPixelScale; }

    void validate(const ViTConfig& model) const {
        if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon: must be finite and >= 0");
        if (alpha && (!(*alpha >= 0.0) || !std::isfinite(*alpha))) throw ConfigError("alpha: must be finite and >= 0");
        if (!std::isfinite(mu) || mu < 0.0) throw ConfigError("mu: must be finite and >= 0");
        if (patchout && patchout->num_patches > model.num_patches())
            throw ConfigError("patchout.num_patches: must lie in [0, " + std::to_string(model.num_patches()) + "]");
        if (tgr) tgr->validate(model.seq_len() - tgr_first_token(model));
    }

    // Leading sequence rows kept out of TGR ranking (the class token, when excluded).
    std::size_t tgr_first_token(const ViTConfig& model) const noexcept {
        return tgr && !tgr->class_token && model.use_class_token ? 1 : 0;
    }

    friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

// The paper-default TGR run (k = 1, s = 0.25 / 0.75 / 0.25, all components).
inline AttackConfig tgr_attack_config() {
    AttackConfig c;
    c.name = "TGR";
    c.tgr = TgrConfig{};
    return c;
}

inline AttackConfig mim_attack_config() { return AttackConfig{}; }

// ---------------------------------------------------------------------------
// Extreme-token selection
// ---------------------------------------------------------------------------

// Returns the 2k indices holding the k largest and the k smallest values
// (by signed value or by magnitude), sorted ascending. Ties resolve to the
// lowest index. The largest are chosen first and the smallest are taken from
// the remaining indices, so the result has no duplicates.
inline std::vector<std::size_t> select_extreme_tokens(std::span<const double> values, std::size_t k,
                                                      SelectionMode mode = SelectionMode::SignedExtremes) {
    const std::size_t n = values.size();
    if (k == 0) return {};
    if (2 * k >= n)
        throw ConfigError("select_extreme_tokens: 2k = " + std::to_string(2 * k) + " must be less than " +
                          std::to_string(n));
    auto key = [&](std::size_t i) { return mode == SelectionMode::MagnitudeExtremes ? std::abs(values[i]) : values[i]; };

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<std::size_t> out;
    out.reserve(2 * k);

    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return key(a) > key(b) || (key(a) == key(b) && a < b); });
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));

    const auto rest = idx.begin() + static_cast<std::ptrdiff_t>(k);
    std::partial_sort(rest, rest + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return key(a) < key(b) || (key(a) == key(b) && a < b); });
    out.insert(out.end(), rest, rest + static_cast<std::ptrdiff_t>(k));

    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<std::size_t> select_extreme_tokens(const Tensor& values, std::size_t k,
                                                      SelectionMode mode = SelectionMode::SignedExtremes) {
    return select_extreme_tokens(values.data(), k, mode);
}

// ---------------------------------------------------------------------------
// Regularization rules
// ---------------------------------------------------------------------------

// QKV- and MLP-kind gradients, [S x C]. Rows before `first` are scaled but
// never ranked or eliminated.
inline Tensor regularize_token_matrix(const Tensor& grad, const TgrConfig& cfg, double s, std::size_t first = 0) {
    if (grad.rank() != 2)
        throw DimensionError("regularize_token_matrix: expected [S x C], got " + shape_str(grad.shape()));
    const std::size_t S = grad.dim(0), C = grad.dim(1);
    if (first >= S) throw DimensionError("regularize_token_matrix: no rankable rows");
    const std::size_t n = S - first;
    Tensor out = grad * s;
    if (cfg.k == 0) return out;

    if (cfg.elimination == EliminationMode::PerChannelEntry) {
        std::vector<double> col(n);
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t t = 0; t < n; ++t) col[t] = grad.at(first + t, c);
            for (std::size_t t : select_extreme_tokens(col, cfg.k, cfg.selection)) out.at(first + t, c) = 0.0;
        }
    } else {
        std::vector<double> score(n);
        for (std::size_t t = 0; t < n; ++t)
            for (double v : grad.row(first + t)) score[t] += std::abs(v);
        for (std::size_t t : select_extreme_tokens(score, cfg.k, cfg.selection))
            std::ranges::fill(out.row(first + t), 0.0);
    }
    return out;
}

// Attention-kind gradients, [M x S x S]. Extremes are ranked over the
// entries whose row and column are both at or past `first`.
inline Tensor regularize_attention_map(const Tensor& grad, const TgrConfig& cfg, double s, std::size_t first = 0) {
    if (grad.rank() != 3 || grad.dim(1) != grad.dim(2))
        throw DimensionError("regularize_attention_map: expected [M x S x S], got " + shape_str(grad.shape()));
    const std::size_t M = grad.dim(0), S = grad.dim(1);
    if (first >= S) throw DimensionError("regularize_attention_map: no rankable rows");
    const std::size_t n = S - first, nn = n * n;
    Tensor out = grad * s;
    if (cfg.k == 0) return out;
    if (2 * cfg.k >= n)
        throw ConfigError("regularize_attention_map: 2k = " + std::to_string(2 * cfg.k) +
                          " must be less than the token count " + std::to_string(n));

    std::vector<double> block(first == 0 ? 0 : M * nn);
    if (first > 0)
        for (std::size_t h = 0; h < M; ++h)
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < n; ++c) block[(h * n + r) * n + c] = grad.at(h, first + r, first + c);
    const std::span<const double> ranked = first == 0 ? grad.data() : std::span<const double>(block);

    auto zero_cross = [&](std::size_t h, std::size_t r, std::size_t c) {
        for (std::size_t j = 0; j < S; ++j) out.at(h, r, j) = 0.0;
        for (std::size_t i = 0; i < S; ++i) out.at(h, i, c) = 0.0;
    };

    if (cfg.elimination == EliminationMode::PerChannelEntry) {
        for (std::size_t h = 0; h < M; ++h)
            for (std::size_t e : select_extreme_tokens(ranked.subspan(h * nn, nn), cfg.k, cfg.selection))
                zero_cross(h, first + e / n, first + e % n);
    } else {
        for (std::size_t e : select_extreme_tokens(ranked, cfg.k, cfg.selection)) {
            const std::size_t rc = e % nn;
            for (std::size_t h = 0; h < M; ++h) zero_cross(h, first + rc / n, first + rc % n);
        }
    }
    return out;
}

inline Tensor regularize(const ModuleGradient& g, const TgrConfig& cfg, std::size_t first = 0) {
    const double s = cfg.scale_for(g.kind);
    return g.kind == Component::Attention ? regularize_attention_map(g.grad, cfg, s, first)
                                          : regularize_token_matrix(g.grad, cfg, s, first);
}

// Components outside cfg.enabled pass through untouched (no scaling either).
inline GradientHook tgr_hook(TgrConfig cfg, std::size_t first = 0) {
    return [cfg, first](const ModuleGradient& g) -> Tensor {
        if (!cfg.enabled.contains(g.kind)) return g.grad;
        return regularize(g, cfg, first);
    };
}

// ---------------------------------------------------------------------------
// Optimizer pieces
// ---------------------------------------------------------------------------

inline Tensor mim_step(const Tensor& momentum, const Tensor& grad, double mu) {
    momentum.require_same_shape(grad, "mim_step");
    const double l1 = l1_norm(grad);
    Tensor out(momentum.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mu * momentum[i] + (l1 > 0.0 ? grad[i] / l1 : 0.0);
    return out;
}

// Uniform sample of num_patches distinct patch indices, in draw order.
inline std::vector<std::size_t> patchout_indices(std::size_t num_tokens, std::size_t num_patches, Rng& rng) {
    if (num_patches == 0 || num_patches > num_tokens)
        throw ConfigError("patchout.num_patches: " + std::to_string(num_patches) + " outside [1, " +
                          std::to_string(num_tokens) + "]");
    std::vector<std::size_t> pool(num_tokens);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < num_patches; ++i) std::swap(pool[i], pool[i + rng.below(num_tokens - i)]);
    pool.resize(num_patches);
    return pool;
}

// {0,1} mask over a [C x H x W] image covering exactly the sampled patches.
inline Tensor patchout_mask(const ViTConfig& cfg, std::size_t num_patches, Rng& rng) {
    const auto chosen = patchout_indices(cfg.num_patches(), num_patches, rng);
    const std::size_t P = cfg.patch_size, G = cfg.grid();
    Tensor mask(cfg.image_shape());
    for (std::size_t n : chosen) {
        const std::size_t py = n / G, px = n % G;
        for (std::size_t c = 0; c < cfg.in_channels; ++c)
            for (std::size_t dy = 0; dy < P; ++dy)
                for (std::size_t dx = 0; dx < P; ++dx) mask.at(c, py * P + dy, px * P + dx) = 1.0;
    }
    return mask;
}

// Entry-wise clamp into [x - eps, x + eps] intersected with the pixel range.
inline Tensor clip_project(const Tensor& x_adv, const Tensor& x, double epsilon, double lo = kPixelMin,
                           double hi = kPixelMax) {
    x_adv.require_same_shape(x, "clip_project");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double lower = std::max(x[i] - epsilon, lo);
        const double upper = std::min(x[i] + epsilon, hi);
        out[i] = std::clamp(x_adv[i], lower, upper);
    }
    return out;
}

inline double sign(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// ---------------------------------------------------------------------------
// Attack loop
// ---------------------------------------------------------------------------

struct AdversarialResult {
    Tensor x_adv;
    std::vector<double> per_step_loss;
    bool success_on_source = false;
};

// Called once per iteration with the step index and the backward result
// (module gradients are recorded after hook application).
using BackwardObserver = std::function<void(std::size_t step, const BackwardResult&)>;

inline AdversarialResult attack(const ViTModel& model, const Tensor& x, std::size_t y, const AttackConfig& cfg,
                                const BackwardObserver& observer = {}) {
    const ViTConfig& mc = model.config();
    if (x.shape() != mc.image_shape())
        throw DimensionError("attack: image " + shape_str(x.shape()) + " does not match model input " +
                             shape_str(mc.image_shape()));
    if (y >= mc.num_classes) throw DomainError("attack: label out of range");
    cfg.validate(mc);

    const double eps = cfg.epsilon_unit();
    const double alpha = cfg.alpha_unit();
    const GradientHook hook = cfg.tgr ? tgr_hook(*cfg.tgr, cfg.tgr_first_token(mc)) : GradientHook{};
    std::optional<Rng> rng;
    if (cfg.patchout) rng.emplace(cfg.patchout->rng_seed ^ cfg.seed);

    AdversarialResult res;
    res.x_adv = x;
    Tensor momentum(x.shape());
    for (std::size_t t = 0; t < cfg.steps; ++t) {
        auto fwd = forward(model, res.x_adv);
        const auto loss = cross_entropy(fwd.logits, y);
        res.per_step_loss.push_back(loss.loss);
        const BackwardResult bwd = backward(model, fwd.cache, loss.grad, hook);
        if (observer) observer(t, bwd);
        Tensor g = bwd.input_grad;
        if (rng) {
            const Tensor mask = patchout_mask(mc, cfg.patchout->count_for(mc.num_patches()), *rng);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mask[i];
        }
        momentum = mim_step(momentum, g, cfg.mu);
        Tensor stepped = res.x_adv;
        for (std::size_t i = 0; i < stepped.size(); ++i) stepped[i] += alpha * sign(momentum[i]);
        res.x_adv = clip_project(stepped, x, eps);
    }
    res.success_on_source = predict(model, res.x_adv) != y;
    return res;
}

}  // namespace tgr
