// SPDX-License-Identifier: Apache-2.0
//
// Datasets, the synthetic shape generator, mini-batch training and the
// default model zoo.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tgr/config.hpp"
#include "tgr/io.hpp"
#include "tgr/parallel.hpp"
#include "tgr/tensor.hpp"
#include "tgr/vit.hpp"

namespace tgr {

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

enum class Split : std::uint8_t { Train, Eval };

struct Dataset {
    std::vector<Tensor> images;  // each [C x H x W], values in [0, 1]
    std::vector<std::size_t> labels;
    std::size_t num_classes = 0;
    std::size_t channels = 0, height = 0, width = 0;
    Split split = Split::Train;

    std::size_t size() const noexcept { return images.size(); }
    bool empty() const noexcept { return images.empty(); }
    Shape image_shape() const { return {channels, height, width}; }

    void validate() const {
        if (images.size() != labels.size()) throw DomainError("dataset: image and label counts differ");
        for (std::size_t i = 0; i < images.size(); ++i) {
            if (images[i].shape() != image_shape())
                throw DimensionError("dataset: image " + std::to_string(i) + " has shape " +
                                     shape_str(images[i].shape()));
            if (labels[i] >= num_classes)
                throw DomainError("dataset: label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                                  " is not below num_classes " + std::to_string(num_classes));
        }
    }

    // Samples [first, first + count).
    Dataset slice(std::size_t first, std::size_t count) const {
        Dataset d = *this;
        d.images.assign(images.begin() + static_cast<std::ptrdiff_t>(first),
                        images.begin() + static_cast<std::ptrdiff_t>(first + count));
        d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(first),
                        labels.begin() + static_cast<std::ptrdiff_t>(first + count));
        return d;
    }
};

// ---------------------------------------------------------------------------
// Synthetic generator
//
// Class c renders shape (c mod 5) in colour pattern (c div 5):
//   shapes   0 square, 1 ring, 2 triangle, 3 plus, 4 diagonal cross
//   patterns 0 warm solid, 1 cool solid, 2 warm striped, 3 cool striped
// Each image gets a random background grey, colour jitter, centre jitter of
// up to 1/8 of the side, half-extent in [0.26, 0.38] of the side, and N(0, 0.03^2)
// pixel noise, then is clamped to [0, 1]. The eval split uses a different
// stream from the same seed.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kSyntheticShapes = 5;
inline constexpr std::size_t kSyntheticPatterns = 4;

namespace detail {

inline bool inside_shape(std::size_t shape, double dx, double dy, double r) {
    const double ax = std::abs(dx), ay = std::abs(dy);
    switch (shape) {
        case 0: return std::max(ax, ay) <= r;
        case 1: {
            const double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= 0.36 * r * r;
        }
        case 2: return dy >= -r && dy <= r && ax <= 0.5 * (dy + r);
        case 3: return (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r);
        default: return std::max(ax, ay) <= r && std::abs(ax - ay) <= r / 3.0;
    }
}

inline Tensor render_sample(std::size_t label, std::size_t size, Rng& rng) {
    const std::size_t shape = label % kSyntheticShapes;
    const std::size_t pattern = label / kSyntheticShapes;
    const bool warm = pattern % 2 == 0;
    const bool striped = pattern >= 2;

    const double s = static_cast<double>(size);
    const double cx = s / 2.0 + rng.uniform(-s / 8.0, s / 8.0);
    const double cy = s / 2.0 + rng.uniform(-s / 8.0, s / 8.0);
    const double r = s * rng.uniform(0.26, 0.38);
    const double bg_level = rng.uniform(0.05, 0.35);
    double bg[3], fg[3];
    const double warm_base[3] = {0.9, 0.4, 0.15}, cool_base[3] = {0.15, 0.45, 0.9};
    for (int c = 0; c < 3; ++c) {
        bg[c] = std::clamp(bg_level + rng.uniform(-0.05, 0.05), 0.0, 1.0);
        fg[c] = std::clamp((warm ? warm_base[c] : cool_base[c]) + rng.uniform(-0.1, 0.1), 0.0, 1.0);
    }

    Tensor img({3, size, size});
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            const bool in = inside_shape(shape, dx, dy, r);
            const double stripe = (striped && (y / 2) % 2 == 1) ? 0.45 : 1.0;
            for (std::size_t c = 0; c < 3; ++c) {
                const double base = in ? fg[c] * stripe : bg[c];
                img.at(c, y, x) = std::clamp(base + 0.03 * rng.normal(), 0.0, 1.0);
            }
        }
    return img;
}

}  // namespace detail

inline Dataset generate_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t image_size,
                                  std::uint64_t seed, Split split = Split::Train) {
    if (num_classes < 2) throw ConfigError("classes: need at least 2 classes");
    if (num_classes > kSyntheticShapes * kSyntheticPatterns)
        throw ConfigError("classes: the synthetic generator supports at most " +
                          std::to_string(kSyntheticShapes * kSyntheticPatterns) + " classes");
    if (image_size < 8) throw ConfigError("size: images must be at least 8 pixels wide");
    Dataset d;
    d.num_classes = num_classes;
    d.channels = 3;
    d.height = d.width = image_size;
    d.split = split;
    Rng rng(seed ^ (split == Split::Eval ? 0xe7a1'5eed'0000'0001ULL : 0ULL));
    d.images.reserve(num_classes * per_class);
    for (std::size_t i = 0; i < per_class; ++i)
        for (std::size_t c = 0; c < num_classes; ++c) {
            d.images.push_back(detail::render_sample(c, image_size, rng));
            d.labels.push_back(c);
        }
    return d;
}

// ---------------------------------------------------------------------------
// Dataset file format
//
//   "TGRD" | u32 version | u64 num_images | u32 C, H, W | u32 num_classes |
//   num_images x C*H*W f64 pixels | num_images x u16 labels |
//   u32 CRC32 of every byte between the version field and the trailer
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

inline std::vector<std::uint8_t> serialize_dataset(const Dataset& d) {
    d.validate();
    if (d.num_classes > 65536) throw DomainError("dataset: labels are stored as u16");
    io::Writer w;
    w.bytes("TGRD", 4);
    w.u32(kDatasetFormatVersion);
    const std::size_t body = w.size();
    w.u64(d.size());
    w.u32(static_cast<std::uint32_t>(d.channels));
    w.u32(static_cast<std::uint32_t>(d.height));
    w.u32(static_cast<std::uint32_t>(d.width));
    w.u32(static_cast<std::uint32_t>(d.num_classes));
    for (const Tensor& img : d.images) w.f64s(img.data());
    for (std::size_t l : d.labels) w.u16(static_cast<std::uint16_t>(l));
    w.seal(body);
    return w.buffer();
}

inline Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
    io::Reader r(bytes, "dataset file");
    char magic[4];
    r.bytes(magic, 4);
    if (std::string_view(magic, 4) != "TGRD") r.fail("bad magic");
    if (r.u32() != kDatasetFormatVersion) r.fail("unsupported version");
    const std::size_t body = r.offset();
    Dataset d;
    const std::uint64_t n = r.u64();
    d.channels = r.u32();
    d.height = r.u32();
    d.width = r.u32();
    d.num_classes = r.u32();
    if (d.channels == 0 || d.height == 0 || d.width == 0) r.fail("zero image dimension");
    const std::size_t per_image = d.channels * d.height * d.width;
    if (n > r.remaining() / (per_image * sizeof(double) + sizeof(std::uint16_t)) + 1)
        r.fail("truncated, header announces " + std::to_string(n) + " images");
    d.images.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        Tensor img(d.image_shape());
        r.f64s(img.data());
        d.images.push_back(std::move(img));
    }
    d.labels.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        const std::size_t at = r.offset();
        const std::uint16_t l = r.u16();
        if (l >= d.num_classes)
            throw DomainError("dataset file: label " + std::to_string(l) + " at byte offset " + std::to_string(at) +
                              " is not below num_classes " + std::to_string(d.num_classes));
        d.labels.push_back(l);
    }
    r.verify_seal(body);
    return d;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& p) { io::write_file(p, serialize_dataset(d)); }

inline Dataset load_dataset(const std::filesystem::path& p) { return deserialize_dataset(io::read_file(p)); }

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Optimizer : std::uint8_t { SgdMomentum, AdamLite };

// Update rules, with lr_t = learning_rate * 0.5 (1 + cos(pi t / total_steps)):
//   SgdMomentum  v = 0.9 v + g + wd w;  w -= lr_t v
//   AdamLite     m = 0.9 m + 0.1 g;  v = 0.999 v + 0.001 g^2;
//                w -= lr_t (m_hat / (sqrt(v_hat) + 1e-8) + wd w)
// Weight decay applies to rank-2 weights only.
struct TrainConfig {
    std::size_t epochs = 8;
    std::size_t batch_size = 16;
    double learning_rate = 2e-3;
    double weight_decay = 0.01;
    Optimizer optimizer = Optimizer::AdamLite;
    std::uint64_t seed = 1;  // batch shuffling
    std::uint64_t init_seed = 11;

    void validate() const {
        if (epochs == 0) throw ConfigError("epochs: must be positive");
        if (batch_size == 0) throw ConfigError("batch_size: must be positive");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate: must be >= 0");
        if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay: must be >= 0");
    }
};

inline TrainConfig train_config_from_kv(const config::KeyValues& kvs, TrainConfig c = {}) {
    for (const auto& [k, v] : kvs) {
        if (k == "epochs") c.epochs = config::parse_u64(k, v);
        else if (k == "batch_size") c.batch_size = config::parse_u64(k, v);
        else if (k == "learning_rate") c.learning_rate = config::parse_double(k, v);
        else if (k == "weight_decay") c.weight_decay = config::parse_double(k, v);
        else if (k == "seed") c.seed = config::parse_u64(k, v);
        else if (k == "init_seed") c.init_seed = config::parse_u64(k, v);
        else if (k == "optimizer") {
            if (v == "sgd-momentum") c.optimizer = Optimizer::SgdMomentum;
            else if (v == "adam-lite") c.optimizer = Optimizer::AdamLite;
            else throw ConfigError(k + ": expected sgd-momentum or adam-lite, got `" + v + "`");
        } else {
            throw ConfigError(k + ": unknown key");
        }
    }
    return c;
}

inline std::string to_text(const TrainConfig& c) {
    std::ostringstream os;
    os << "# train config\n"
       << "epochs = " << c.epochs << '\n'
       << "batch_size = " << c.batch_size << '\n'
       << "learning_rate = " << config::fmt_double(c.learning_rate) << '\n'
       << "weight_decay = " << config::fmt_double(c.weight_decay) << '\n'
       << "optimizer = " << (c.optimizer == Optimizer::AdamLite ? "adam-lite" : "sgd-momentum") << '\n'
       << "seed = " << c.seed << '\n'
       << "init_seed = " << c.init_seed << '\n';
    return os.str();
}

struct EpochStats {
    std::size_t epoch;
    double train_loss;
    double train_accuracy;  // percent
    std::optional<double> eval_accuracy;
};

struct TrainResult {
    ViTModel model;
    std::vector<EpochStats> history;
    std::vector<double> step_losses;  // mean loss of every mini-batch
};

inline void check_compatible(const ViTModel& m, const Dataset& d) {
    if (d.image_shape() != m.config().image_shape())
        throw DimensionError("dataset images " + shape_str(d.image_shape()) + " do not match model input " +
                             shape_str(m.config().image_shape()));
    if (d.num_classes > m.config().num_classes)
        throw DimensionError("dataset has more classes than the model head");
}

// Percentage of samples classified correctly.
inline double accuracy(const ViTModel& m, const Dataset& d, std::size_t threads = 1) {
    check_compatible(m, d);
    if (d.empty()) throw DomainError("accuracy: empty dataset");
    std::vector<std::uint8_t> ok(d.size());
    parallel_for(d.size(), threads, [&](std::size_t i) { ok[i] = predict(m, d.images[i]) == d.labels[i]; });
    std::size_t n = 0;
    for (auto v : ok) n += v;
    return 100.0 * static_cast<double>(n) / static_cast<double>(d.size());
}

namespace detail {

struct OptimizerState {
    std::vector<Tensor> m, v;
    std::size_t t = 0;
};

// Per-batch gradients are summed over fixed chunks of this many samples and
// the chunks are reduced in order, so results do not depend on threads.
inline constexpr std::size_t kGradChunk = 4;

}  // namespace detail

inline TrainResult train(const ViTModel& init, const Dataset& data, const TrainConfig& cfg,
                         const Dataset* eval = nullptr, std::size_t threads = 1) {
    cfg.validate();
    check_compatible(init, data);
    if (eval) check_compatible(init, *eval);
    if (data.empty()) throw DomainError("train: empty dataset");

    TrainResult res{init, {}, {}};
    ViTModel& model = res.model;
    Rng shuffle_rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    const std::size_t batches_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
    const double total_steps = static_cast<double>(batches_per_epoch * cfg.epochs);
    detail::OptimizerState opt;
    model.params().for_each([&](const std::string&, const Tensor& t) {
        opt.m.emplace_back(t.shape());
        opt.v.emplace_back(t.shape());
    });

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t b = 0; b < batches_per_epoch; ++b) {
            const std::size_t first = b * cfg.batch_size;
            const std::size_t count = std::min(cfg.batch_size, data.size() - first);
            const std::size_t chunks = (count + detail::kGradChunk - 1) / detail::kGradChunk;
            std::vector<ViTParams> chunk_grads(chunks);
            std::vector<double> chunk_loss(chunks, 0.0);
            std::vector<std::size_t> chunk_correct(chunks, 0);
            parallel_for(chunks, threads, [&](std::size_t ci) {
                ViTParams g = ViTParams::zeros(model.config());
                const std::size_t lo = ci * detail::kGradChunk;
                const std::size_t hi = std::min(count, lo + detail::kGradChunk);
                for (std::size_t j = lo; j < hi; ++j) {
                    const std::size_t idx = order[first + j];
                    auto fwd = forward(model, data.images[idx]);
                    const auto ce = cross_entropy(fwd.logits, data.labels[idx]);
                    chunk_loss[ci] += ce.loss;
                    chunk_correct[ci] += argmax(fwd.logits.data()) == data.labels[idx];
                    backward(model, fwd.cache, ce.grad, {}, &g);
                }
                chunk_grads[ci] = std::move(g);
            });
            double batch_loss = 0.0;
            for (std::size_t ci = 0; ci < chunks; ++ci) {
                batch_loss += chunk_loss[ci];
                correct += chunk_correct[ci];
            }
            if (!std::isfinite(batch_loss))
                throw TrainingError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(b));
            loss_sum += batch_loss;
            res.step_losses.push_back(batch_loss / static_cast<double>(count));

            // Reduce in chunk order, then average.
            std::vector<Tensor*> grads;
            ViTParams& total = chunk_grads[0];
            for (std::size_t ci = 1; ci < chunks; ++ci) {
                std::vector<Tensor*> dst;
                total.for_each([&](const std::string&, Tensor& t) { dst.push_back(&t); });
                std::size_t i = 0;
                chunk_grads[ci].for_each([&](const std::string&, const Tensor& t) { *dst[i++] += t; });
            }
            total.for_each([&](const std::string&, Tensor& t) { grads.push_back(&t); });

            ++opt.t;
            const double lr = cfg.learning_rate * 0.5 *
                              (1.0 + std::cos(std::numbers::pi * static_cast<double>(opt.t - 1) / total_steps));
            const double inv_n = 1.0 / static_cast<double>(count);
            const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(opt.t));
            const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(opt.t));
            std::size_t pi = 0;
            model.mutable_params().for_each([&](const std::string&, Tensor& w) {
                const Tensor& g = *grads[pi];
                Tensor& m = opt.m[pi];
                Tensor& v = opt.v[pi];
                const bool decay = w.rank() == 2;
                for (std::size_t i = 0; i < w.size(); ++i) {
                    const double gi = g[i] * inv_n;
                    if (cfg.optimizer == Optimizer::AdamLite) {
                        m[i] = 0.9 * m[i] + 0.1 * gi;
                        v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                        const double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8);
                        w[i] -= lr * (upd + (decay ? cfg.weight_decay * w[i] : 0.0));
                    } else {
                        m[i] = 0.9 * m[i] + gi + (decay ? cfg.weight_decay * w[i] : 0.0);
                        w[i] -= lr * m[i];
                    }
                }
                ++pi;
            });
        }
        EpochStats st{epoch, loss_sum / static_cast<double>(data.size()),
                      100.0 * static_cast<double>(correct) / static_cast<double>(data.size()), std::nullopt};
        if (eval && !eval->empty()) st.eval_accuracy = accuracy(model, *eval, threads);
        res.history.push_back(st);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Zoo
// ---------------------------------------------------------------------------

struct ZooEntry {
    std::string name;
    ViTConfig config;
};

using ZooSpec = std::vector<ZooEntry>;

inline ViTConfig zoo_config(std::size_t depth, std::size_t heads, std::size_t dim) {
    ViTConfig c;
    c.depth = depth;
    c.num_heads = heads;
    c.embed_dim = dim;
    return c;
}

// Four architecturally distinct 32x32 / patch-4 ViTs (64 patch tokens + class token).
inline ZooSpec default_zoo() {
    return {
        {"vit-d4-h2-e64", zoo_config(4, 2, 64)},
        {"vit-d6-h4-e64", zoo_config(6, 4, 64)},
        {"vit-d4-h4-e96", zoo_config(4, 4, 96)},
        {"vit-d8-h2-e64", zoo_config(8, 2, 64)},
    };
}

inline const ZooEntry* find_arch(const ZooSpec& zoo, std::string_view name) {
    for (const auto& e : zoo)
        if (e.name == name) return &e;
    return nullptr;
}

}  // namespace tgr
