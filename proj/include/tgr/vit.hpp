// SPDX-License-Identifier: Apache-2.0
//
// A tiny pre-norm Vision Transformer with a hand-written backward pass.
//
// The backward pass exposes three interception points per block, visited in
// reverse block order and, within a block, in the order the gradient reaches
// them:
//
//   MLP       d loss / d (MLP input, i.e. LN2 output)          [S x D]
//   Attention d loss / d (post-softmax attention probabilities) [M x S x S]
//   QKV       d loss / d (input of the fused QKV projection)    [S x D]
//
// A GradientHook sees each intercepted gradient and returns the tensor that
// continues to flow upstream.

#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "tgr/io.hpp"
#include "tgr/tensor.hpp"

namespace tgr {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t in_channels = 3;
    std::size_t embed_dim = 64;
    std::size_t num_heads = 2;
    std::size_t depth = 4;
    double mlp_ratio = 2.0;
    std::size_t num_classes = 10;
    bool use_class_token = true;

    std::size_t grid() const noexcept { return image_size / patch_size; }
    std::size_t num_patches() const noexcept { return grid() * grid(); }
    std::size_t seq_len() const noexcept { return num_patches() + (use_class_token ? 1 : 0); }
    std::size_t head_dim() const noexcept { return embed_dim / num_heads; }
    std::size_t patch_dim() const noexcept { return patch_size * patch_size * in_channels; }
    std::size_t mlp_hidden() const noexcept {
        return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
    }
    Shape image_shape() const { return {in_channels, image_size, image_size}; }

    void validate() const {
        if (patch_size == 0 || image_size == 0 || in_channels == 0 || embed_dim == 0 || num_heads == 0 ||
            depth == 0 || num_classes == 0)
            throw ConfigError("ViTConfig: all sizes must be positive");
        if (image_size % patch_size != 0) throw ConfigError("ViTConfig: image_size must be divisible by patch_size");
        if (embed_dim % num_heads != 0) throw ConfigError("ViTConfig: embed_dim must be divisible by num_heads");
        if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) throw ConfigError("ViTConfig: mlp_ratio must be positive");
    }

    friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct BlockParams {
    Tensor ln1_gamma, ln1_beta;
    Tensor qkv_w, qkv_b;    // [D x 3D], [3D]; columns are Q | K | V, heads contiguous inside each
    Tensor proj_w, proj_b;  // [D x D], [D]
    Tensor ln2_gamma, ln2_beta;
    Tensor fc1_w, fc1_b;  // [D x Hm], [Hm]
    Tensor fc2_w, fc2_b;  // [Hm x D], [D]
};

struct ViTParams {
    Tensor patch_w, patch_b;  // [P*P*C x D], [D]
    Tensor cls_token;         // [D], present iff use_class_token
    Tensor pos_embed;         // [S x D]
    std::vector<BlockParams> blocks;
    Tensor norm_gamma, norm_beta;
    Tensor head_w, head_b;  // [D x K], [K]

    // Visits every parameter in canonical order; this order is the on-disk order.
    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        f(std::string("patch_embed.weight"), self.patch_w);
        f(std::string("patch_embed.bias"), self.patch_b);
        if (!self.cls_token.empty()) f(std::string("cls_token"), self.cls_token);
        f(std::string("pos_embed"), self.pos_embed);
        for (std::size_t l = 0; l < self.blocks.size(); ++l) {
            auto& b = self.blocks[l];
            const std::string p = "blocks." + std::to_string(l) + ".";
            f(p + "ln1.gamma", b.ln1_gamma);
            f(p + "ln1.beta", b.ln1_beta);
            f(p + "attn.qkv.weight", b.qkv_w);
            f(p + "attn.qkv.bias", b.qkv_b);
            f(p + "attn.proj.weight", b.proj_w);
            f(p + "attn.proj.bias", b.proj_b);
            f(p + "ln2.gamma", b.ln2_gamma);
            f(p + "ln2.beta", b.ln2_beta);
            f(p + "mlp.fc1.weight", b.fc1_w);
            f(p + "mlp.fc1.bias", b.fc1_b);
            f(p + "mlp.fc2.weight", b.fc2_w);
            f(p + "mlp.fc2.bias", b.fc2_b);
        }
        f(std::string("norm.gamma"), self.norm_gamma);
        f(std::string("norm.beta"), self.norm_beta);
        f(std::string("head.weight"), self.head_w);
        f(std::string("head.bias"), self.head_b);
    }
    template <class F>
    void for_each(F&& f) {
        visit(*this, std::forward<F>(f));
    }
    template <class F>
    void for_each(F&& f) const {
        visit(*this, std::forward<F>(f));
    }

    std::size_t count() const {
        std::size_t n = 0;
        for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
        return n;
    }

    // All-zero parameters shaped for cfg (LayerNorm gammas included).
    static ViTParams zeros(const ViTConfig& cfg) {
        cfg.validate();
        const std::size_t D = cfg.embed_dim, Hm = cfg.mlp_hidden(), K = cfg.num_classes;
        ViTParams p;
        p.patch_w = Tensor({cfg.patch_dim(), D});
        p.patch_b = Tensor({D});
        if (cfg.use_class_token) p.cls_token = Tensor({D});
        p.pos_embed = Tensor({cfg.seq_len(), D});
        p.blocks.resize(cfg.depth);
        for (auto& b : p.blocks) {
            b.ln1_gamma = Tensor({D});
            b.ln1_beta = Tensor({D});
            b.qkv_w = Tensor({D, 3 * D});
            b.qkv_b = Tensor({3 * D});
            b.proj_w = Tensor({D, D});
            b.proj_b = Tensor({D});
            b.ln2_gamma = Tensor({D});
            b.ln2_beta = Tensor({D});
            b.fc1_w = Tensor({D, Hm});
            b.fc1_b = Tensor({Hm});
            b.fc2_w = Tensor({Hm, D});
            b.fc2_b = Tensor({D});
        }
        p.norm_gamma = Tensor({D});
        p.norm_beta = Tensor({D});
        p.head_w = Tensor({D, K});
        p.head_b = Tensor({K});
        return p;
    }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace detail {
inline std::uint64_t next_model_id() noexcept {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

// A model is immutable through its const interface. Every copy and every
// mutable_params() call takes a fresh identity, which invalidates caches
// produced by earlier forward passes.
class ViTModel {
public:
    ViTModel(ViTConfig cfg, ViTParams params) : config_(cfg), params_(std::move(params)) {
        config_.validate();
        check_shapes();
    }
    ViTModel(const ViTModel& o) : config_(o.config_), params_(o.params_) {}
    ViTModel& operator=(const ViTModel& o) {
        config_ = o.config_;
        params_ = o.params_;
        id_ = detail::next_model_id();
        return *this;
    }
    ViTModel(ViTModel&& o) noexcept : config_(o.config_), params_(std::move(o.params_)) {}
    ViTModel& operator=(ViTModel&& o) noexcept {
        config_ = o.config_;
        params_ = std::move(o.params_);
        id_ = detail::next_model_id();
        return *this;
    }

    static ViTModel zeros(const ViTConfig& cfg) { return {cfg, ViTParams::zeros(cfg)}; }

    // Xavier-uniform linear weights, N(0, 0.02^2) positional/class embeddings,
    // unit LayerNorm gains, zero biases.
    static ViTModel random(const ViTConfig& cfg, std::uint64_t seed) {
        ViTParams p = ViTParams::zeros(cfg);
        Rng rng(seed);
        auto xavier = [&](Tensor& w) {
            const double a = std::sqrt(6.0 / static_cast<double>(w.dim(0) + w.dim(1)));
            for (double& v : w.data()) v = rng.uniform(-a, a);
        };
        auto small_normal = [&](Tensor& t) {
            for (double& v : t.data()) v = 0.02 * rng.normal();
        };
        xavier(p.patch_w);
        if (cfg.use_class_token) small_normal(p.cls_token);
        small_normal(p.pos_embed);
        for (auto& b : p.blocks) {
            b.ln1_gamma.fill(1.0);
            b.ln2_gamma.fill(1.0);
            xavier(b.qkv_w);
            xavier(b.proj_w);
            xavier(b.fc1_w);
            xavier(b.fc2_w);
        }
        p.norm_gamma.fill(1.0);
        xavier(p.head_w);
        return {cfg, std::move(p)};
    }

    const ViTConfig& config() const noexcept { return config_; }
    const ViTParams& params() const noexcept { return params_; }
    ViTParams& mutable_params() noexcept {
        id_ = detail::next_model_id();
        return params_;
    }
    std::uint64_t id() const noexcept { return id_; }

    void check_shapes() const {
        const ViTParams ref = ViTParams::zeros(config_);
        std::vector<Shape> want;
        ref.for_each([&](const std::string&, const Tensor& t) { want.push_back(t.shape()); });
        std::size_t i = 0;
        bool ok = params_.blocks.size() == config_.depth &&
                  params_.cls_token.empty() == !config_.use_class_token;
        params_.for_each([&](const std::string& name, const Tensor& t) {
            if (!ok) return;
            if (i >= want.size() || t.shape() != want[i])
                throw DimensionError("parameter " + name + " has shape " + shape_str(t.shape()));
            ++i;
        });
        if (!ok || i != want.size()) throw DimensionError("parameter set does not match ViTConfig");
    }

private:
    ViTConfig config_;
    ViTParams params_;
    std::uint64_t id_ = detail::next_model_id();
};

// ---------------------------------------------------------------------------
// Patch tokenization
// ---------------------------------------------------------------------------

// Row n = py * (W/P) + px holds patch (py, px), flattened channels-last:
// column (dy * P + dx) * C + c.
inline Tensor patchify(const Tensor& image, std::size_t P) {
    if (image.rank() != 3) throw DimensionError("patchify: expected C x H x W, got " + shape_str(image.shape()));
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (P == 0 || H % P != 0 || W % P != 0)
        throw DimensionError("patchify: image " + shape_str(image.shape()) + " not divisible by patch size " +
                             std::to_string(P));
    const std::size_t gh = H / P, gw = W / P;
    Tensor out({gh * gw, P * P * C});
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            auto row = out.row(py * gw + px);
            for (std::size_t dy = 0; dy < P; ++dy)
                for (std::size_t dx = 0; dx < P; ++dx)
                    for (std::size_t c = 0; c < C; ++c)
                        row[(dy * P + dx) * C + c] = image.at(c, py * P + dy, px * P + dx);
        }
    return out;
}

inline Tensor unpatchify(const Tensor& patches, std::size_t P, std::size_t C, std::size_t H, std::size_t W) {
    if (P == 0 || H % P != 0 || W % P != 0) throw DimensionError("unpatchify: size not divisible by patch size");
    const std::size_t gh = H / P, gw = W / P;
    if (patches.shape() != Shape{gh * gw, P * P * C})
        throw DimensionError("unpatchify: patches have shape " + shape_str(patches.shape()));
    Tensor image({C, H, W});
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            const auto row = patches.row(py * gw + px);
            for (std::size_t dy = 0; dy < P; ++dy)
                for (std::size_t dx = 0; dx < P; ++dx)
                    for (std::size_t c = 0; c < C; ++c)
                        image.at(c, py * P + dy, px * P + dx) = row[(dy * P + dx) * C + c];
        }
    return image;
}

// ---------------------------------------------------------------------------
// Forward cache and module gradients
// ---------------------------------------------------------------------------

enum class Component : std::uint8_t { Attention = 0, QKV = 1, MLP = 2 };

inline constexpr std::array<Component, 3> kAllComponents{Component::Attention, Component::QKV, Component::MLP};

inline std::string_view to_string(Component c) noexcept {
    switch (c) {
        case Component::Attention: return "Attention";
        case Component::QKV: return "QKV";
        case Component::MLP: return "MLP";
    }
    return "?";
}

struct ModuleGradient {
    Component kind;
    std::size_t block_index;
    Tensor grad;
};

using GradientHook = std::function<Tensor(const ModuleGradient&)>;

struct BlockCache {
    Tensor x_in;          // [S x D] residual stream entering the block
    LayerNormOutput ln1;  // ln1.y is the QKV projection input
    Tensor qkv;           // [S x 3D]
    Tensor scores;        // [M x S x S] scaled, pre-softmax
    Tensor attn;          // [M x S x S] attention probabilities
    Tensor attn_concat;   // [S x D] heads concatenated, before the output projection
    Tensor h;             // [S x D] residual stream after attention
    LayerNormOutput ln2;  // ln2.y is the MLP input
    Tensor fc1_pre;       // [S x Hm]
    Tensor fc1_act;       // [S x Hm]
};

struct ForwardCache {
    std::uint64_t model_id = 0;
    Tensor patches;  // [N x P*P*C]
    std::vector<BlockCache> blocks;
    LayerNormOutput final_ln;
    Tensor pooled;  // [D]
    Tensor logits;  // [K]
};

struct ForwardResult {
    Tensor logits;
    ForwardCache cache;
};

struct BackwardResult {
    Tensor input_grad;                          // [C x H x W]
    std::vector<ModuleGradient> module_grads;  // post-hook, 3 per block, reverse block order
};

namespace detail {

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul(x, w);
    for (std::size_t r = 0; r < y.dim(0); ++r) {
        auto yr = y.row(r);
        for (std::size_t j = 0; j < yr.size(); ++j) yr[j] += b[j];
    }
    return y;
}

// dx = dy W^T; dW += x^T dy; db += colsum(dy)
inline Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dw, Tensor* db) {
    if (dw) *dw += matmul_tn(x, dy);
    if (db)
        for (std::size_t r = 0; r < dy.dim(0); ++r) {
            const auto dr = dy.row(r);
            for (std::size_t j = 0; j < dr.size(); ++j) (*db)[j] += dr[j];
        }
    return matmul_nt(dy, w);
}

// Copies columns [off, off + width) of a row-major [rows x cols] tensor.
inline Tensor take_cols(const Tensor& t, std::size_t off, std::size_t width) {
    Tensor out({t.dim(0), width});
    for (std::size_t r = 0; r < t.dim(0); ++r) {
        const auto src = t.row(r);
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(off), width, out.row(r).begin());
    }
    return out;
}

inline void put_cols(Tensor& t, std::size_t off, const Tensor& src) {
    for (std::size_t r = 0; r < t.dim(0); ++r) {
        const auto s = src.row(r);
        std::copy(s.begin(), s.end(), t.row(r).begin() + static_cast<std::ptrdiff_t>(off));
    }
}

inline Tensor head_slice(const Tensor& t3, std::size_t h) {
    const std::size_t S = t3.dim(1), T = t3.dim(2);
    Tensor out({S, T});
    std::copy_n(t3.data().begin() + static_cast<std::ptrdiff_t>(h * S * T), S * T, out.data().begin());
    return out;
}

inline void put_head(Tensor& t3, std::size_t h, const Tensor& src) {
    std::copy(src.data().begin(), src.data().end(),
              t3.data().begin() + static_cast<std::ptrdiff_t>(h * src.size()));
}

inline Tensor apply_hook(const GradientHook& hook, Component kind, std::size_t block, Tensor grad,
                         std::vector<ModuleGradient>& record) {
    if (hook) {
        ModuleGradient mg{kind, block, std::move(grad)};
        Tensor out = hook(mg);
        if (out.shape() != mg.grad.shape())
            throw DimensionError("gradient hook changed the shape of the " + std::string(to_string(kind)) +
                                 " gradient of block " + std::to_string(block));
        grad = std::move(out);
    }
    record.push_back({kind, block, grad});
    return grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline ForwardResult forward(const ViTModel& model, const Tensor& image) {
    const ViTConfig& cfg = model.config();
    const ViTParams& p = model.params();
    if (image.shape() != cfg.image_shape())
        throw DimensionError("forward: image shape " + shape_str(image.shape()) + " does not match model input " +
                             shape_str(cfg.image_shape()));
    const std::size_t S = cfg.seq_len(), D = cfg.embed_dim, M = cfg.num_heads, dh = cfg.head_dim();
    const std::size_t off = cfg.use_class_token ? 1 : 0;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardResult res;
    ForwardCache& c = res.cache;
    c.model_id = model.id();
    c.patches = patchify(image, cfg.patch_size);

    Tensor x({S, D});
    {
        const Tensor emb = detail::linear(c.patches, p.patch_w, p.patch_b);
        if (cfg.use_class_token) std::copy(p.cls_token.data().begin(), p.cls_token.data().end(), x.row(0).begin());
        for (std::size_t n = 0; n < cfg.num_patches(); ++n) {
            const auto e = emb.row(n);
            std::copy(e.begin(), e.end(), x.row(n + off).begin());
        }
        x += p.pos_embed;
    }

    c.blocks.resize(cfg.depth);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const BlockParams& b = p.blocks[l];
        BlockCache& bc = c.blocks[l];
        bc.x_in = x;
        bc.ln1 = layer_norm(x, b.ln1_gamma, b.ln1_beta);
        bc.qkv = detail::linear(bc.ln1.y, b.qkv_w, b.qkv_b);
        bc.scores = Tensor({M, S, S});
        bc.attn = Tensor({M, S, S});
        bc.attn_concat = Tensor({S, D});
        for (std::size_t h = 0; h < M; ++h) {
            const Tensor q = detail::take_cols(bc.qkv, h * dh, dh);
            const Tensor k = detail::take_cols(bc.qkv, D + h * dh, dh);
            const Tensor v = detail::take_cols(bc.qkv, 2 * D + h * dh, dh);
            Tensor sc = matmul_nt(q, k) * scale;
            const Tensor a = softmax(sc);
            detail::put_head(bc.scores, h, sc);
            detail::put_head(bc.attn, h, a);
            detail::put_cols(bc.attn_concat, h * dh, matmul(a, v));
        }
        bc.h = x + detail::linear(bc.attn_concat, b.proj_w, b.proj_b);
        bc.ln2 = layer_norm(bc.h, b.ln2_gamma, b.ln2_beta);
        bc.fc1_pre = detail::linear(bc.ln2.y, b.fc1_w, b.fc1_b);
        bc.fc1_act = gelu(bc.fc1_pre);
        x = bc.h + detail::linear(bc.fc1_act, b.fc2_w, b.fc2_b);
    }

    c.final_ln = layer_norm(x, p.norm_gamma, p.norm_beta);
    c.pooled = Tensor({D});
    if (cfg.use_class_token) {
        const auto r0 = c.final_ln.y.row(0);
        std::copy(r0.begin(), r0.end(), c.pooled.data().begin());
    } else {
        for (std::size_t s = 0; s < S; ++s) {
            const auto r = c.final_ln.y.row(s);
            for (std::size_t d = 0; d < D; ++d) c.pooled[d] += r[d];
        }
        c.pooled *= 1.0 / static_cast<double>(S);
    }
    c.logits = detail::linear(c.pooled.reshaped({1, D}), p.head_w, p.head_b).reshaped({cfg.num_classes});
    res.logits = c.logits;
    return res;
}

inline Tensor logits(const ViTModel& model, const Tensor& image) { return forward(model, image).logits; }

inline std::size_t predict(const ViTModel& model, const Tensor& image) { return argmax(logits(model, image).data()); }

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Reverse-mode pass from d loss / d logits. When param_grads is non-null,
// parameter gradients are accumulated into it (it must be shaped like the
// model's parameters).
inline BackwardResult backward(const ViTModel& model, const ForwardCache& c, const Tensor& loss_grad,
                               const GradientHook& hook = {}, ViTParams* param_grads = nullptr) {
    const ViTConfig& cfg = model.config();
    const ViTParams& p = model.params();
    if (c.model_id != model.id() || c.blocks.size() != cfg.depth)
        throw ContractError("backward: forward cache was not produced by this model");
    if (loss_grad.size() != cfg.num_classes)
        throw DimensionError("backward: loss gradient must have " + std::to_string(cfg.num_classes) + " entries");
    const std::size_t S = cfg.seq_len(), D = cfg.embed_dim, M = cfg.num_heads, dh = cfg.head_dim();
    const std::size_t off = cfg.use_class_token ? 1 : 0;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    ViTParams* g = param_grads;

    BackwardResult res;
    res.module_grads.reserve(3 * cfg.depth);

    // Head.
    const Tensor dl = loss_grad.reshaped({1, cfg.num_classes});
    const Tensor dpooled =
        detail::linear_backward(c.pooled.reshaped({1, D}), p.head_w, dl, g ? &g->head_w : nullptr,
                                g ? &g->head_b : nullptr);
    Tensor dfinal({S, D});
    if (cfg.use_class_token) {
        std::copy(dpooled.data().begin(), dpooled.data().end(), dfinal.row(0).begin());
    } else {
        const double inv = 1.0 / static_cast<double>(S);
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t d = 0; d < D; ++d) dfinal.at(s, d) = dpooled[d] * inv;
    }
    LayerNormGrads lg = layer_norm_backward(c.final_ln, p.norm_gamma, dfinal);
    if (g) {
        g->norm_gamma += lg.dgamma;
        g->norm_beta += lg.dbeta;
    }
    Tensor dx = std::move(lg.dx);

    for (std::size_t li = cfg.depth; li-- > 0;) {
        const BlockParams& b = p.blocks[li];
        const BlockCache& bc = c.blocks[li];
        BlockParams* gb = g ? &g->blocks[li] : nullptr;

        // MLP branch: x_out = h + fc2(gelu(fc1(ln2(h)))).
        Tensor dact = detail::linear_backward(bc.fc1_act, b.fc2_w, dx, gb ? &gb->fc2_w : nullptr,
                                              gb ? &gb->fc2_b : nullptr);
        const Tensor dpre = gelu_backward(bc.fc1_pre, dact);
        Tensor dmlp_in = detail::linear_backward(bc.ln2.y, b.fc1_w, dpre, gb ? &gb->fc1_w : nullptr,
                                                 gb ? &gb->fc1_b : nullptr);
        dmlp_in = detail::apply_hook(hook, Component::MLP, li, std::move(dmlp_in), res.module_grads);
        LayerNormGrads l2 = layer_norm_backward(bc.ln2, b.ln2_gamma, dmlp_in);
        if (gb) {
            gb->ln2_gamma += l2.dgamma;
            gb->ln2_beta += l2.dbeta;
        }
        Tensor dmid = dx + l2.dx;

        // Attention branch: h = x_in + proj(concat_h(A_h V_h)).
        const Tensor dconcat = detail::linear_backward(bc.attn_concat, b.proj_w, dmid, gb ? &gb->proj_w : nullptr,
                                                       gb ? &gb->proj_b : nullptr);
        Tensor dattn({M, S, S});
        Tensor dqkv({S, 3 * D});
        for (std::size_t h = 0; h < M; ++h) {
            const Tensor a = detail::head_slice(bc.attn, h);
            const Tensor v = detail::take_cols(bc.qkv, 2 * D + h * dh, dh);
            const Tensor dout = detail::take_cols(dconcat, h * dh, dh);
            detail::put_head(dattn, h, matmul_nt(dout, v));
            detail::put_cols(dqkv, 2 * D + h * dh, matmul_tn(a, dout));
        }
        dattn = detail::apply_hook(hook, Component::Attention, li, std::move(dattn), res.module_grads);
        for (std::size_t h = 0; h < M; ++h) {
            const Tensor a = detail::head_slice(bc.attn, h);
            const Tensor q = detail::take_cols(bc.qkv, h * dh, dh);
            const Tensor k = detail::take_cols(bc.qkv, D + h * dh, dh);
            const Tensor dscores = softmax_backward(a, detail::head_slice(dattn, h)) * scale;
            detail::put_cols(dqkv, h * dh, matmul(dscores, k));
            detail::put_cols(dqkv, D + h * dh, matmul_tn(dscores, q));
        }
        Tensor dqkv_in = detail::linear_backward(bc.ln1.y, b.qkv_w, dqkv, gb ? &gb->qkv_w : nullptr,
                                                 gb ? &gb->qkv_b : nullptr);
        dqkv_in = detail::apply_hook(hook, Component::QKV, li, std::move(dqkv_in), res.module_grads);
        LayerNormGrads l1 = layer_norm_backward(bc.ln1, b.ln1_gamma, dqkv_in);
        if (gb) {
            gb->ln1_gamma += l1.dgamma;
            gb->ln1_beta += l1.dbeta;
        }
        dx = dmid + l1.dx;
    }

    // Embedding.
    if (g) {
        g->pos_embed += dx;
        if (cfg.use_class_token)
            for (std::size_t d = 0; d < D; ++d) g->cls_token[d] += dx.at(0, d);
    }
    Tensor dtok({cfg.num_patches(), D});
    for (std::size_t n = 0; n < cfg.num_patches(); ++n) {
        const auto r = dx.row(n + off);
        std::copy(r.begin(), r.end(), dtok.row(n).begin());
    }
    const Tensor dpatches = detail::linear_backward(c.patches, p.patch_w, dtok, g ? &g->patch_w : nullptr,
                                                    g ? &g->patch_b : nullptr);
    res.input_grad = unpatchify(dpatches, cfg.patch_size, cfg.in_channels, cfg.image_size, cfg.image_size);
    return res;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossResult {
    double loss;
    Tensor grad;  // d loss / d logits = softmax(logits) - onehot(label)
};

inline LossResult cross_entropy(const Tensor& logits, std::size_t label) {
    if (label >= logits.size())
        throw DomainError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                          std::to_string(logits.size()) + " classes");
    const auto z = logits.data();
    const double mx = *std::max_element(z.begin(), z.end());
    double se = 0.0;
    for (double v : z) se += std::exp(v - mx);
    const double lse = mx + std::log(se);
    LossResult r{lse - z[label], Tensor(logits.shape())};
    for (std::size_t i = 0; i < z.size(); ++i) r.grad[i] = std::exp(z[i] - lse);
    r.grad[label] -= 1.0;
    return r;
}

// ---------------------------------------------------------------------------
// Model file format
//
//   "TGRV" | u32 version | config | u32 param_count |
//   param_count x (u32 name_len, name, u32 rank, rank x u64 dims, f64 payload) |
//   u32 CRC32 of every byte between the version field and the trailer
//
// config: u32 image_size, patch_size, in_channels, embed_dim, num_heads,
// depth, num_classes; f64 mlp_ratio; u8 use_class_token. All little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kModelFormatVersion = 1;

inline std::vector<std::uint8_t> serialize_model(const ViTModel& m) {
    io::Writer w;
    w.bytes("TGRV", 4);
    w.u32(kModelFormatVersion);
    const std::size_t body = w.size();
    const ViTConfig& c = m.config();
    for (std::size_t v : {c.image_size, c.patch_size, c.in_channels, c.embed_dim, c.num_heads, c.depth, c.num_classes})
        w.u32(static_cast<std::uint32_t>(v));
    w.f64(c.mlp_ratio);
    w.put<std::uint8_t>(c.use_class_token ? 1 : 0);
    std::uint32_t count = 0;
    m.params().for_each([&](const std::string&, const Tensor&) { ++count; });
    w.u32(count);
    m.params().for_each([&](const std::string& name, const Tensor& t) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u64(d);
        w.f64s(t.data());
    });
    w.seal(body);
    return w.buffer();
}

inline ViTModel deserialize_model(std::span<const std::uint8_t> bytes) {
    io::Reader r(bytes, "model file");
    char magic[4];
    r.bytes(magic, 4);
    if (std::string_view(magic, 4) != "TGRV") r.fail("bad magic");
    if (r.u32() != kModelFormatVersion) r.fail("unsupported version");
    const std::size_t body = r.offset();
    ViTConfig c;
    c.image_size = r.u32();
    c.patch_size = r.u32();
    c.in_channels = r.u32();
    c.embed_dim = r.u32();
    c.num_heads = r.u32();
    c.depth = r.u32();
    c.num_classes = r.u32();
    c.mlp_ratio = r.f64();
    c.use_class_token = r.get<std::uint8_t>() != 0;
    try {
        c.validate();
    } catch (const ConfigError& e) {
        r.fail(e.what());
    }
    ViTParams p = ViTParams::zeros(c);
    const std::uint32_t count = r.u32();
    std::uint32_t seen = 0;
    p.for_each([&](const std::string& name, Tensor& t) {
        ++seen;
        if (seen > count) r.fail("missing parameter " + name);
        if (r.str() != name) r.fail("expected parameter " + name);
        const std::uint32_t rank = r.u32();
        Shape s(rank);
        for (auto& d : s) d = r.u64();
        if (s != t.shape()) r.fail("parameter " + name + " has shape " + shape_str(s));
        r.f64s(t.data());
    });
    if (seen != count) r.fail("unexpected parameter count");
    r.verify_seal(body);
    return {c, std::move(p)};
}

inline void save_model(const ViTModel& m, const std::filesystem::path& path) {
    io::write_file(path, serialize_model(m));
}

inline ViTModel load_model(const std::filesystem::path& path) { return deserialize_model(io::read_file(path)); }

}  // namespace tgr
