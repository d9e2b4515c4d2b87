// SPDX-License-Identifier: Apache-2.0
//
// Test-side oracles. Nothing here calls into the library's numerical
// kernels; the reference ViT is written out with plain loops.

#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "tgr/tgr.hpp"

namespace tgr::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
    Tensor t(shape);
    for (double& v : t.data()) v = scale * rng.normal();
    return t;
}

inline Tensor random_image(const ViTConfig& cfg, Rng& rng) {
    Tensor t(cfg.image_shape());
    for (double& v : t.data()) v = rng.uniform();
    return t;
}

// |a - n| / max(|a|, |n|, floor)
inline double rel_err(double a, double n, double floor = 1e-10) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Central difference of f along coordinate i of x.
inline double central_difference(const std::function<double(const Tensor&)>& f, Tensor x, std::size_t i,
                                 double h = 1e-5) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    return (fp - fm) / (2.0 * h);
}

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            long double s = 0.0L;
            for (std::size_t t = 0; t < k; ++t) s += static_cast<long double>(a.at(i, t)) * b.at(t, j);
            c.at(i, j) = static_cast<double>(s);
        }
    return c;
}

// Two-pass mean and population variance in long double.
inline std::pair<double, double> two_pass_moments(std::span<const double> x) {
    long double mean = 0.0L;
    for (double v : x) mean += v;
    mean /= static_cast<long double>(x.size());
    long double var = 0.0L;
    for (double v : x) var += (v - mean) * (v - mean);
    return {static_cast<double>(mean), static_cast<double>(var / static_cast<long double>(x.size()))};
}

namespace ref {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

// y = x W + b with W stored [in x out].
inline Mat linear(const Mat& x, const Tensor& w, const Tensor& b) {
    const std::size_t in = w.dim(0), out = w.dim(1);
    Mat y = zeros(x.size(), out);
    for (std::size_t r = 0; r < x.size(); ++r)
        for (std::size_t o = 0; o < out; ++o) {
            double s = b[o];
            for (std::size_t i = 0; i < in; ++i) s += x[r][i] * w.at(i, o);
            y[r][o] = s;
        }
    return y;
}

inline Mat layer_norm(const Mat& x, const Tensor& g, const Tensor& b) {
    Mat y = x;
    for (std::size_t r = 0; r < x.size(); ++r) {
        const double d = static_cast<double>(x[r].size());
        double mu = 0.0;
        for (double v : x[r]) mu += v;
        mu /= d;
        double var = 0.0;
        for (double v : x[r]) var += (v - mu) * (v - mu);
        var /= d;
        for (std::size_t i = 0; i < x[r].size(); ++i) y[r][i] = (x[r][i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
    }
    return y;
}

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
}

// Straight-line pre-norm ViT forward, written independently of the library.
inline std::vector<double> vit_logits(const ViTModel& m, const Tensor& img) {
    const ViTConfig& c = m.config();
    const ViTParams& p = m.params();
    const std::size_t P = c.patch_size, G = c.grid(), C = c.in_channels, D = c.embed_dim, M = c.num_heads;
    const std::size_t dh = D / M, S = c.seq_len(), off = c.use_class_token ? 1 : 0;

    Mat patches = zeros(G * G, P * P * C);
    for (std::size_t py = 0; py < G; ++py)
        for (std::size_t px = 0; px < G; ++px)
            for (std::size_t dy = 0; dy < P; ++dy)
                for (std::size_t dx = 0; dx < P; ++dx)
                    for (std::size_t ch = 0; ch < C; ++ch)
                        patches[py * G + px][(dy * P + dx) * C + ch] = img.at(ch, py * P + dy, px * P + dx);
    const Mat emb = linear(patches, p.patch_w, p.patch_b);
    Mat x = zeros(S, D);
    for (std::size_t d = 0; d < D; ++d) {
        if (off) x[0][d] = p.cls_token[d];
        for (std::size_t n = 0; n < G * G; ++n) x[n + off][d] = emb[n][d];
        for (std::size_t s = 0; s < S; ++s) x[s][d] += p.pos_embed.at(s, d);
    }

    for (const BlockParams& b : p.blocks) {
        const Mat a = layer_norm(x, b.ln1_gamma, b.ln1_beta);
        const Mat qkv = linear(a, b.qkv_w, b.qkv_b);
        Mat cat = zeros(S, D);
        for (std::size_t h = 0; h < M; ++h)
            for (std::size_t i = 0; i < S; ++i) {
                std::vector<double> sc(S);
                double mx = -1e300;
                for (std::size_t j = 0; j < S; ++j) {
                    double s = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) s += qkv[i][h * dh + t] * qkv[j][D + h * dh + t];
                    sc[j] = s / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, sc[j]);
                }
                double z = 0.0;
                for (double& v : sc) z += (v = std::exp(v - mx));
                for (std::size_t t = 0; t < dh; ++t) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < S; ++j) s += sc[j] / z * qkv[j][2 * D + h * dh + t];
                    cat[i][h * dh + t] = s;
                }
            }
        const Mat proj = linear(cat, b.proj_w, b.proj_b);
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t d = 0; d < D; ++d) x[s][d] += proj[s][d];
        Mat hid = linear(layer_norm(x, b.ln2_gamma, b.ln2_beta), b.fc1_w, b.fc1_b);
        for (auto& r : hid)
            for (double& v : r) v = gelu(v);
        const Mat out = linear(hid, b.fc2_w, b.fc2_b);
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t d = 0; d < D; ++d) x[s][d] += out[s][d];
    }

    const Mat xn = layer_norm(x, p.norm_gamma, p.norm_beta);
    Mat pooled = zeros(1, D);
    for (std::size_t d = 0; d < D; ++d) {
        if (off) pooled[0][d] = xn[0][d];
        else {
            for (std::size_t s = 0; s < S; ++s) pooled[0][d] += xn[s][d];
            pooled[0][d] /= static_cast<double>(S);
        }
    }
    return linear(pooled, p.head_w, p.head_b)[0];
}

}  // namespace ref

// A small config that keeps full-network finite differences cheap.
inline ViTConfig tiny_config(std::size_t depth = 2, std::size_t heads = 2, bool cls = true) {
    ViTConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.in_channels = 3;
    c.embed_dim = 8;
    c.num_heads = heads;
    c.depth = depth;
    c.mlp_ratio = 2.0;
    c.num_classes = 4;
    c.use_class_token = cls;
    return c;
}

// Reference token-matrix rule: scale, then zero the extreme cells found by
// sorting each column (or row norms) from scratch.
inline std::vector<std::size_t> brute_extremes(std::vector<double> v, std::size_t k, SelectionMode mode) {
    if (k == 0) return {};
    if (mode == SelectionMode::MagnitudeExtremes)
        for (double& x : v) x = std::abs(x);
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    // Largest values first, ties to the lower index.
    std::vector<std::size_t> desc = idx;
    std::stable_sort(desc.begin(), desc.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    std::vector<std::size_t> out(desc.begin(), desc.begin() + static_cast<std::ptrdiff_t>(k));
    std::vector<bool> taken(v.size(), false);
    for (auto i : out) taken[i] = true;
    std::vector<std::size_t> asc;
    for (auto i : idx)
        if (!taken[i]) asc.push_back(i);
    std::stable_sort(asc.begin(), asc.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    out.insert(out.end(), asc.begin(), asc.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(out.begin(), out.end());
    return out;
}

// Rows below `first` take no part in ranking.
inline Tensor brute_token_rule(const Tensor& g, const TgrConfig& cfg, double s, std::size_t first = 0) {
    const std::size_t S = g.dim(0), C = g.dim(1);
    Tensor out = g;
    for (double& v : out.data()) v *= s;
    if (cfg.k == 0) return out;
    std::vector<std::size_t> rows;
    for (std::size_t r = first; r < S; ++r) rows.push_back(r);
    if (cfg.elimination == EliminationMode::PerChannelEntry) {
        for (std::size_t c = 0; c < C; ++c) {
            std::vector<double> col;
            for (auto r : rows) col.push_back(g.at(r, c));
            for (auto i : brute_extremes(col, cfg.k, cfg.selection)) out.at(rows[i], c) = 0.0;
        }
    } else {
        std::vector<double> norms(rows.size(), 0.0);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < C; ++c) norms[i] += std::abs(g.at(rows[i], c));
        for (auto i : brute_extremes(norms, cfg.k, SelectionMode::SignedExtremes))
            for (std::size_t c = 0; c < C; ++c) out.at(rows[i], c) = 0.0;
    }
    return out;
}

// Reference attention rule: each extreme entry (r, c) of a head's S x S map
// zeroes row r and column c of that head. Global mode picks the extremes
// over all heads at once and zeroes the rows and columns in every head.
// Only entries with row and column at or past `first` are ranked.
inline Tensor brute_attention_rule(const Tensor& g, const TgrConfig& cfg, double s, std::size_t first = 0) {
    const std::size_t M = g.dim(0), S = g.dim(1);
    Tensor out = g;
    for (double& v : out.data()) v *= s;
    if (cfg.k == 0) return out;
    auto zero_rc = [&](std::size_t h, std::size_t r, std::size_t c) {
        for (std::size_t j = 0; j < S; ++j) out.at(h, r, j) = 0.0;
        for (std::size_t i = 0; i < S; ++i) out.at(h, i, c) = 0.0;
    };
    struct Entry { std::size_t h, r, c; };
    auto eligible = [&](std::size_t h0, std::size_t h1) {
        std::vector<Entry> e;
        for (std::size_t h = h0; h < h1; ++h)
            for (std::size_t r = first; r < S; ++r)
                for (std::size_t c = first; c < S; ++c) e.push_back({h, r, c});
        return e;
    };
    auto values = [&](const std::vector<Entry>& e) {
        std::vector<double> v;
        for (const auto& x : e) v.push_back(g.at(x.h, x.r, x.c));
        return v;
    };
    if (cfg.elimination == EliminationMode::PerChannelEntry) {
        for (std::size_t h = 0; h < M; ++h) {
            const auto e = eligible(h, h + 1);
            for (auto i : brute_extremes(values(e), cfg.k, cfg.selection)) zero_rc(h, e[i].r, e[i].c);
        }
    } else {
        const auto e = eligible(0, M);
        for (auto i : brute_extremes(values(e), cfg.k, cfg.selection))
            for (std::size_t h = 0; h < M; ++h) zero_rc(h, e[i].r, e[i].c);
    }
    return out;
}

}  // namespace tgr::testing
