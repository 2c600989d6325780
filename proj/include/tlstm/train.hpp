#pragma once

// Mini-batch minimization of the squared error on standardized SE labels.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "tlstm/config.hpp"
#include "tlstm/error.hpp"
#include "tlstm/model.hpp"
#include "tlstm/preprocess.hpp"

namespace tlstm {

inline double mse(std::span<const double> y, std::span<const double> y_hat) {
    if (y.size() != y_hat.size()) throw ShapeError("mse: length mismatch");
    if (y.empty()) throw DomainError("mse: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double d = y[i] - y_hat[i];
        acc += d * d;
    }
    return acc / static_cast<double>(y.size());
}

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
    std::size_t epochs = 1000;
    std::size_t batch_size = 128;
    OptimizerKind optimizer = OptimizerKind::adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 42;
    DecayKind decay = DecayKind::log_decay;
    std::size_t hidden_size = 64;
    std::size_t head_layers = 0;
    /// Global gradient-norm clip; disabled when unset.
    std::optional<double> clip_norm;
    /// Checkpoint every n epochs (0: only the final one).
    std::size_t checkpoint_every = 0;
    std::size_t threads = 1;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("adam betas must lie in [0,1)");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
        if (hidden_size < 1) throw ConfigError("hidden_size must be >= 1");
        if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
        if (threads < 1) throw ConfigError("threads must be >= 1");
    }
};

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

/// Applies `key = value` settings on top of `base`. Unknown keys are rejected.
inline TrainConfig apply_train_config(TrainConfig base, const KeyValues& kv) {
    ConfigReader r(kv);
    std::string optimizer = to_string(base.optimizer), decay = to_string(base.decay);
    double clip = base.clip_norm.value_or(0.0);
    r.read("epochs", base.epochs);
    r.read("batch_size", base.batch_size);
    r.read("optimizer", optimizer);
    r.read("lr", base.lr);
    r.read("beta1", base.beta1);
    r.read("beta2", base.beta2);
    r.read("epsilon", base.epsilon);
    r.read("seed", base.seed);
    r.read("decay", decay);
    r.read("hidden_size", base.hidden_size);
    r.read("head_layers", base.head_layers);
    r.read("clip_norm", clip);
    r.read("checkpoint_every", base.checkpoint_every);
    r.read("threads", base.threads);
    r.finish();
    if (optimizer == "adam") base.optimizer = OptimizerKind::adam;
    else if (optimizer == "sgd") base.optimizer = OptimizerKind::sgd;
    else throw ConfigError("unknown optimizer '" + optimizer + "'");
    base.decay = parse_decay_kind(decay);
    base.clip_norm = clip > 0.0 ? std::optional<double>(clip) : std::nullopt;
    return base;
}

inline KeyValues to_key_values(const TrainConfig& c) {
    auto num = [](double v) {
        char buf[32];
        auto res = std::to_chars(buf, buf + sizeof buf, v);
        return std::string(buf, res.ptr);
    };
    return {{"epochs", std::to_string(c.epochs)},
            {"batch_size", std::to_string(c.batch_size)},
            {"optimizer", to_string(c.optimizer)},
            {"lr", num(c.lr)},
            {"beta1", num(c.beta1)},
            {"beta2", num(c.beta2)},
            {"epsilon", num(c.epsilon)},
            {"seed", std::to_string(c.seed)},
            {"decay", to_string(c.decay)},
            {"hidden_size", std::to_string(c.hidden_size)},
            {"head_layers", std::to_string(c.head_layers)},
            {"clip_norm", c.clip_norm ? num(*c.clip_norm) : std::string("0")},
            {"checkpoint_every", std::to_string(c.checkpoint_every)},
            {"threads", std::to_string(c.threads)}};
}

// ---------------------------------------------------------------------------
// Batching

/// Per-epoch batches of indices into `samples`: each batch holds one input
/// length, every sample appears once, and the order depends only on (seed, epoch).
inline std::vector<std::vector<std::size_t>> make_batches(std::span<const Sample> samples, std::size_t batch_size,
                                                          std::uint64_t seed, std::size_t epoch) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32), 0x62617463u};
    std::mt19937_64 rng(seq);
    std::array<std::vector<std::size_t>, kMaxTrainLength> by_length;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto L = samples[i].length();
        if (L < 1 || L > kMaxTrainLength)
            throw DomainError("make_batches: sample of length " + std::to_string(L) + " cannot be trained on");
        by_length[L - 1].push_back(i);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (auto& layer : by_length) {
        std::shuffle(layer.begin(), layer.end(), rng);
        for (std::size_t start = 0; start < layer.size(); start += batch_size) {
            const auto end = std::min(layer.size(), start + batch_size);
            batches.emplace_back(layer.begin() + static_cast<std::ptrdiff_t>(start),
                                 layer.begin() + static_cast<std::ptrdiff_t>(end));
        }
    }
    std::shuffle(batches.begin(), batches.end(), rng);
    return batches;
}

// ---------------------------------------------------------------------------
// Optimizers

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamMoments {
    std::vector<double> first;
    std::vector<double> second;
};

/// Bias-corrected Adam update at step t (1-based).
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& m, std::size_t t,
                      const AdamHyper& hp) {
    if (t < 1) throw DomainError("adam_step: step counter starts at 1");
    if (grads.size() != params.size()) throw ShapeError("adam_step: gradient length mismatch");
    if (m.first.empty()) m.first.assign(params.size(), 0.0);
    if (m.second.empty()) m.second.assign(params.size(), 0.0);
    if (m.first.size() != params.size() || m.second.size() != params.size())
        throw ShapeError("adam_step: moment length mismatch");
    const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m.first[i] = hp.beta1 * m.first[i] + (1.0 - hp.beta1) * grads[i];
        m.second[i] = hp.beta2 * m.second[i] + (1.0 - hp.beta2) * grads[i] * grads[i];
        const double mhat = m.first[i] / c1;
        const double vhat = m.second[i] / c2;
        params[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.epsilon);
    }
}

inline void sgd_step(std::span<double> params, std::span<const double> grads, double lr) {
    if (grads.size() != params.size()) throw ShapeError("sgd_step: gradient length mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

/// Rescales `grads` so its L2 norm is at most `max_norm`. Returns the original norm.
inline double clip_global_norm(std::span<double> grads, double max_norm) {
    double sq = 0.0;
    for (double g : grads) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& g : grads) g *= s;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Loss and gradient

struct LossAndGradient {
    double loss = 0.0;
    std::vector<double> gradient;
};

/// Mean squared error of a batch and its gradient with respect to the
/// flattened parameters. With threads > 1 the batch is cut into contiguous
/// chunks, each differentiated on its own tape, and the chunk results are
/// summed in chunk order.
inline LossAndGradient batch_loss_and_gradient(const TlstmParams& params, const Batch& batch, DecayKind kind,
                                               std::size_t threads = 1) {
    auto run_chunk = [&](std::size_t begin, std::size_t end) {
        Batch part;
        part.length = batch.length;
        part.size = end - begin;
        part.inputs.reserve(batch.length);
        for (const auto& x : batch.inputs) {
            Tensor sub(x.rows, part.size);
            for (std::size_t r = 0; r < x.rows; ++r)
                for (std::size_t c = begin; c < end; ++c) sub(r, c - begin) = x(r, c);
            part.inputs.push_back(std::move(sub));
        }
        for (const auto& row : batch.intervals)
            part.intervals.emplace_back(row.begin() + static_cast<std::ptrdiff_t>(begin),
                                        row.begin() + static_cast<std::ptrdiff_t>(end));
        part.targets = Tensor(1, part.size,
                              std::vector<double>(batch.targets.data.begin() + static_cast<std::ptrdiff_t>(begin),
                                                  batch.targets.data.begin() + static_cast<std::ptrdiff_t>(end)));
        Tape tape;
        const auto bound = bind(tape, params, true);
        const Var pred = forward(tape, bound, part, kind, params.hidden_size);
        Var loss = tape.mse_reduce(pred, tape.constant(part.targets));
        if (part.size != batch.size)
            loss = tape.scalar_mul(loss, static_cast<double>(part.size) / static_cast<double>(batch.size));
        tape.backward(loss);
        return LossAndGradient{tape.value(loss).data[0], gather_gradients(tape, bound)};
    };

    const std::size_t chunks = std::max<std::size_t>(1, std::min(threads, batch.size));
    if (chunks == 1) return run_chunk(0, batch.size);

    std::vector<LossAndGradient> parts(chunks);
    std::vector<std::exception_ptr> errors(chunks);
    {
        std::vector<std::jthread> workers;
        for (std::size_t c = 0; c < chunks; ++c) {
            const std::size_t begin = batch.size * c / chunks, end = batch.size * (c + 1) / chunks;
            workers.emplace_back([&, c, begin, end] {
                try {
                    parts[c] = run_chunk(begin, end);
                } catch (...) {
                    errors[c] = std::current_exception();
                }
            });
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    LossAndGradient total{0.0, std::vector<double>(params.parameter_count(), 0.0)};
    for (const auto& p : parts) {
        total.loss += p.loss;
        for (std::size_t i = 0; i < total.gradient.size(); ++i) total.gradient[i] += p.gradient[i];
    }
    return total;
}

// ---------------------------------------------------------------------------
// Gradient verification

/// Random standardized batch: N(0,1) inputs and targets, intervals in 1..8.
inline Batch random_batch(std::size_t length, std::size_t size, std::mt19937_64& rng) {
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_int_distribution<int> gap(1, 8);
    Batch b;
    b.length = length;
    b.size = size;
    for (std::size_t t = 0; t < length; ++t) {
        Tensor x(kFeatureDim, size);
        for (auto& v : x.data) v = z(rng);
        b.inputs.push_back(std::move(x));
        std::vector<int> row(size);
        for (auto& d : row) d = gap(rng);
        b.intervals.push_back(std::move(row));
    }
    b.targets = Tensor(1, size);
    for (auto& v : b.targets.data) v = z(rng);
    return b;
}

/// Every parameter, biases included, drawn from U(-scale, scale).
inline TlstmParams random_params(std::size_t hidden_size, std::mt19937_64& rng, double scale = 0.5,
                                 std::size_t head_layers = 0) {
    auto p = TlstmParams::zeros(kFeatureDim, hidden_size, head_layers);
    std::uniform_real_distribution<double> u(-scale, scale);
    auto flat = p.flatten();
    for (auto& v : flat) v = u(rng);
    p.assign(flat);
    return p;
}

namespace detail {

/// Batch MSE evaluated in extended precision straight from the cell
/// equations; `flat` follows TlstmParams::flatten order.
inline long double extended_loss(const std::vector<long double>& flat, const TlstmParams& shape, const Batch& batch,
                                 DecayKind kind) {
    using R = long double;
    const std::size_t D = shape.input_size, H = shape.hidden_size;
    std::vector<std::pair<const R*, std::size_t>> view;  // (data, cols) per tensor
    std::size_t pos = 0;
    TlstmParams layout = shape;
    for (const auto& [name, t] : layout.named()) {
        view.emplace_back(flat.data() + pos, t->cols);
        pos += t->size();
    }
    auto at = [&](std::size_t tensor, std::size_t r, std::size_t c) { return view[tensor].first[r * view[tensor].second + c]; };
    auto sig = [](R z) { return R(1) / (R(1) + std::exp(-z)); };
    R total = 0;
    for (std::size_t j = 0; j < batch.size; ++j) {
        std::vector<R> C(H, 0), h(H, 0), Cs(H), pre(4 * H);
        for (std::size_t step = 0; step < batch.length; ++step) {
            const R g = static_cast<R>(decay(kind, static_cast<double>(batch.intervals[step][j])));
            for (std::size_t k = 0; k < H; ++k) {
                R a = at(13, k, 0);
                for (std::size_t m = 0; m < H; ++m) a += at(12, k, m) * C[m];
                Cs[k] = std::tanh(a);
            }
            for (std::size_t gate = 0; gate < 4; ++gate) {
                for (std::size_t k = 0; k < H; ++k) {
                    R a = at(3 * gate + 2, k, 0);
                    for (std::size_t d = 0; d < D; ++d) a += at(3 * gate, k, d) * batch.inputs[step](d, j);
                    for (std::size_t m = 0; m < H; ++m) a += at(3 * gate + 1, k, m) * h[m];
                    pre[gate * H + k] = a;
                }
            }
            for (std::size_t k = 0; k < H; ++k) {
                const R adjusted = (C[k] - Cs[k]) + Cs[k] * g;
                C[k] = sig(pre[k]) * adjusted + sig(pre[H + k]) * std::tanh(pre[2 * H + k]);
                h[k] = sig(pre[3 * H + k]) * std::tanh(C[k]);
            }
        }
        std::size_t tensor = 14;
        for (std::size_t l = 0; l < shape.head_layers(); ++l, tensor += 2) {
            std::vector<R> z(H);
            for (std::size_t k = 0; k < H; ++k) {
                R a = at(tensor + 1, k, 0);
                for (std::size_t m = 0; m < H; ++m) a += at(tensor, k, m) * h[m];
                z[k] = std::tanh(a);
            }
            h = std::move(z);
        }
        R y = at(tensor + 1, 0, 0);
        for (std::size_t k = 0; k < H; ++k) y += at(tensor, 0, k) * h[k];
        const R e = y - static_cast<R>(batch.targets.data[j]);
        total += e * e;
    }
    return total / static_cast<R>(batch.size);
}

} // namespace detail

/// Central-difference check of the batch MSE gradient. Probes are evaluated
/// in extended precision so that the difference quotient resolves small
/// gradient entries. With `coords_per_tensor` > 0 only that many evenly spaced
/// coordinates of each tensor are probed.
inline double model_gradient_check(const TlstmParams& params, const Batch& batch, DecayKind kind,
                                   std::size_t coords_per_tensor = 0, double h = 1e-5) {
    const auto analytic = batch_loss_and_gradient(params, batch, kind).gradient;
    const auto flat = params.flatten();
    std::vector<long double> theta(flat.begin(), flat.end());
    double worst = 0.0;
    auto probe = [&](std::size_t j) {
        const long double saved = theta[j];
        theta[j] = saved + h;
        const long double up = detail::extended_loss(theta, params, batch, kind);
        theta[j] = saved - h;
        const long double down = detail::extended_loss(theta, params, batch, kind);
        theta[j] = saved;
        const double numeric = static_cast<double>((up - down) / (2.0L * h));
        if (!std::isfinite(numeric)) throw NumericError("gradient_check: non-finite probe");
        worst = std::max(worst, ad::relative_error(analytic[j], numeric));
    };
    std::size_t offset = 0;
    TlstmParams layout = params;
    for (const auto& [name, t] : layout.named()) {
        const std::size_t n = t->size();
        const std::size_t k = coords_per_tensor > 0 ? std::min(n, coords_per_tensor) : n;
        for (std::size_t i = 0; i < k; ++i) probe(offset + i * n / k);
        offset += n;
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Training loop

struct LossTrace {
    std::vector<double> mse;
    std::vector<double> seconds;

    [[nodiscard]] std::size_t epochs() const { return mse.size(); }

    void write_csv(std::ostream& out) const {
        out << "epoch,mse,seconds\n";
        char buf[96];
        for (std::size_t e = 0; e < mse.size(); ++e) {
            std::snprintf(buf, sizeof buf, "%zu,%.17g,%.6f\n", e + 1, mse[e], seconds[e]);
            out << buf;
        }
    }
};

struct TrainResult {
    TlstmParams params;
    LossTrace trace;
};

/// Called with (epoch, params) at the checkpoint cadence and after the final epoch.
using CheckpointFn = std::function<void(std::size_t, const TlstmParams&)>;

/// Trains from a fresh seeded initialization. Samples longer than
/// kMaxTrainLength are rejected. On a non-finite loss the last good
/// parameters are handed to `on_checkpoint` before NumericError is thrown.
inline TrainResult train(std::span<const Sample> training, const Standardizer& standardizer,
                         const TrainConfig& config, const CheckpointFn& on_checkpoint = {}) {
    config.validate();
    if (training.empty()) throw DomainError("train: empty training set");
    for (const auto& s : training)
        if (!s.trainable()) throw DomainError("train: sample of length " + std::to_string(s.length()) + " reached training");

    TrainResult result{TlstmParams::initialize(kFeatureDim, config.hidden_size, config.seed, config.head_layers), {}};
    auto& params = result.params;
    std::vector<double> flat = params.flatten();
    AdamMoments moments;
    const AdamHyper hyper{config.lr, config.beta1, config.beta2, config.epsilon};
    std::size_t step = 0;
    std::size_t last_good_epoch = 0;
    TlstmParams last_good = params;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double weighted = 0.0;
        std::size_t seen = 0;
        const auto batches = make_batches(training, config.batch_size, config.seed, epoch);
        for (const auto& idx : batches) {
            std::vector<const Sample*> members;
            members.reserve(idx.size());
            for (auto i : idx) members.push_back(&training[i]);
            const auto batch = make_batch(members, standardizer);

            LossAndGradient lg;
            try {
                lg = batch_loss_and_gradient(params, batch, config.decay, config.threads);
            } catch (const NumericError& e) {
                if (on_checkpoint && last_good_epoch > 0) on_checkpoint(last_good_epoch, last_good);
                throw NumericError(std::string("training diverged in epoch ") + std::to_string(epoch + 1) + ": " +
                                   e.what());
            }
            if (!std::isfinite(lg.loss)) {
                if (on_checkpoint && last_good_epoch > 0) on_checkpoint(last_good_epoch, last_good);
                throw NumericError("training diverged in epoch " + std::to_string(epoch + 1));
            }
            weighted += lg.loss * static_cast<double>(idx.size());
            seen += idx.size();
            if (config.clip_norm) clip_global_norm(lg.gradient, *config.clip_norm);
            ++step;
            if (config.optimizer == OptimizerKind::adam) adam_step(flat, lg.gradient, moments, step, hyper);
            else sgd_step(flat, lg.gradient, config.lr);
            params.assign(flat);
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.trace.mse.push_back(weighted / static_cast<double>(seen));
        result.trace.seconds.push_back(seconds);
        last_good = params;
        last_good_epoch = epoch + 1;
        const bool final_epoch = epoch + 1 == config.epochs;
        if (on_checkpoint && (final_epoch || (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0)))
            on_checkpoint(epoch + 1, params);
    }
    return result;
}

} // namespace tlstm
