#pragma once

// Time-aware LSTM: the standard LSTM cell, the elapsed-time memory
// decomposition, the horizon-shifted sequence network with its dense head,
// and the text checkpoint container.
//
// Activations are laid out feature-major: a batch of B samples is a D x B
// (inputs) or H x B (states) matrix, one column per sample.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tlstm/autodiff.hpp"
#include "tlstm/error.hpp"
#include "tlstm/preprocess.hpp"

namespace tlstm {

using ad::Tape;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------------------
// Elapsed-time decay

enum class DecayKind { log_decay, inverse_decay, none };

inline const char* to_string(DecayKind k) {
    switch (k) {
        case DecayKind::log_decay: return "log_decay";
        case DecayKind::inverse_decay: return "inverse_decay";
        case DecayKind::none: return "none";
    }
    return "?";
}

inline DecayKind parse_decay_kind(std::string_view s) {
    if (s == "log_decay" || s == "log") return DecayKind::log_decay;
    if (s == "inverse_decay" || s == "inverse") return DecayKind::inverse_decay;
    if (s == "none") return DecayKind::none;
    throw ConfigError("unknown decay kind '" + std::string(s) + "' (expected log_decay, inverse_decay or none)");
}

/// Discount g applied to the short-term memory after `delta` quarters.
inline double decay(DecayKind kind, double delta) {
    switch (kind) {
        case DecayKind::log_decay:
            if (!(delta >= 0.0)) throw DomainError("log decay requires delta >= 0");
            return 1.0 / std::log(std::numbers::e + delta);
        case DecayKind::inverse_decay:
            if (!(delta >= 1.0)) throw DomainError("inverse decay requires delta >= 1");
            return 1.0 / delta;
        case DecayKind::none:
            return 1.0;
    }
    throw DomainError("unknown decay kind");
}

// ---------------------------------------------------------------------------
// Parameters

struct TlstmParams {
    std::size_t input_size = kFeatureDim;
    std::size_t hidden_size = 64;

    // gates: W (H x D), U (H x H), b (H x 1)
    Tensor W_f, U_f, b_f;
    Tensor W_i, U_i, b_i;
    Tensor W_c, U_c, b_c;
    Tensor W_o, U_o, b_o;
    // memory decomposition
    Tensor W_d, b_d;
    // optional tanh layers (H x H, H x 1) ahead of the affine output
    std::vector<Tensor> head_W, head_b;
    Tensor W_y, b_y;  // 1 x H, 1 x 1

    static TlstmParams zeros(std::size_t input_size, std::size_t hidden_size, std::size_t head_layers = 0) {
        if (input_size == 0 || hidden_size == 0) throw ShapeError("TlstmParams: sizes must be positive");
        TlstmParams p;
        p.input_size = input_size;
        p.hidden_size = hidden_size;
        const auto D = input_size, H = hidden_size;
        for (Tensor* w : {&p.W_f, &p.W_i, &p.W_c, &p.W_o}) *w = Tensor(H, D);
        for (Tensor* u : {&p.U_f, &p.U_i, &p.U_c, &p.U_o, &p.W_d}) *u = Tensor(H, H);
        for (Tensor* b : {&p.b_f, &p.b_i, &p.b_c, &p.b_o, &p.b_d}) *b = Tensor(H, 1);
        for (std::size_t l = 0; l < head_layers; ++l) {
            p.head_W.emplace_back(H, H);
            p.head_b.emplace_back(H, 1);
        }
        p.W_y = Tensor(1, H);
        p.b_y = Tensor(1, 1);
        return p;
    }

    /// Uniform Glorot-style initialization with zero biases.
    static TlstmParams initialize(std::size_t input_size, std::size_t hidden_size, std::uint64_t seed,
                                  std::size_t head_layers = 0) {
        auto p = zeros(input_size, hidden_size, head_layers);
        std::mt19937_64 rng(seed);
        auto fill = [&rng](Tensor& t, double limit) {
            std::uniform_real_distribution<double> u(-limit, limit);
            for (auto& x : t.data) x = u(rng);
        };
        const double D = static_cast<double>(input_size), H = static_cast<double>(hidden_size);
        for (Tensor* w : {&p.W_f, &p.W_i, &p.W_c, &p.W_o}) fill(*w, std::sqrt(6.0 / (D + H)));
        for (Tensor* u : {&p.U_f, &p.U_i, &p.U_c, &p.U_o, &p.W_d}) fill(*u, std::sqrt(6.0 / (2.0 * H)));
        for (auto& w : p.head_W) fill(w, std::sqrt(6.0 / (2.0 * H)));
        fill(p.W_y, std::sqrt(6.0 / (H + 1.0)));
        return p;
    }

    [[nodiscard]] std::size_t head_layers() const { return head_W.size(); }

    /// Every tensor with its checkpoint name, in a fixed order.
    std::vector<std::pair<std::string, Tensor*>> named() {
        std::vector<std::pair<std::string, Tensor*>> out = {
            {"W_f", &W_f}, {"U_f", &U_f}, {"b_f", &b_f}, {"W_i", &W_i}, {"U_i", &U_i}, {"b_i", &b_i},
            {"W_c", &W_c}, {"U_c", &U_c}, {"b_c", &b_c}, {"W_o", &W_o}, {"U_o", &U_o}, {"b_o", &b_o},
            {"W_d", &W_d}, {"b_d", &b_d}};
        for (std::size_t l = 0; l < head_W.size(); ++l) {
            out.emplace_back("head_W" + std::to_string(l), &head_W[l]);
            out.emplace_back("head_b" + std::to_string(l), &head_b[l]);
        }
        out.emplace_back("W_y", &W_y);
        out.emplace_back("b_y", &b_y);
        return out;
    }
    std::vector<std::pair<std::string, const Tensor*>> named() const {
        std::vector<std::pair<std::string, const Tensor*>> out;
        for (auto& [n, t] : const_cast<TlstmParams*>(this)->named()) out.emplace_back(n, t);
        return out;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named()) n += t->size();
        return n;
    }

    [[nodiscard]] std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(parameter_count());
        for (const auto& [name, t] : named()) out.insert(out.end(), t->data.begin(), t->data.end());
        return out;
    }

    void assign(std::span<const double> flat) {
        if (flat.size() != parameter_count()) throw ShapeError("TlstmParams::assign: length mismatch");
        std::size_t off = 0;
        for (auto& [name, t] : named()) {
            std::copy(flat.begin() + off, flat.begin() + off + t->size(), t->data.begin());
            off += t->size();
        }
    }

    void validate() const {
        const auto D = input_size, H = hidden_size;
        auto expect = [](const Tensor& t, std::size_t r, std::size_t c, const std::string& name) {
            if (t.rows != r || t.cols != c)
                throw ShapeError("parameter " + name + " has shape " + t.shape_str() + ", expected " +
                                 std::to_string(r) + "x" + std::to_string(c));
            for (double x : t.data)
                if (!std::isfinite(x)) throw NumericError("parameter " + name + " is not finite");
        };
        if (head_W.size() != head_b.size()) throw ShapeError("head weight/bias count mismatch");
        for (const auto& [name, t] : named()) {
            if (name[0] == 'W' && name != "W_d" && name != "W_y") expect(*t, H, D, name);
            else if (name[0] == 'U' || name == "W_d" || name.rfind("head_W", 0) == 0) expect(*t, H, H, name);
            else if (name == "W_y") expect(*t, 1, H, name);
            else if (name == "b_y") expect(*t, 1, 1, name);
            else expect(*t, H, 1, name);
        }
    }
};

/// Tape handles for every parameter tensor, in TlstmParams::named() order.
struct BoundParams {
    Var W_f, U_f, b_f, W_i, U_i, b_i, W_c, U_c, b_c, W_o, U_o, b_o, W_d, b_d;
    std::vector<Var> head_W, head_b;
    Var W_y, b_y;

    [[nodiscard]] std::vector<Var> all() const {
        std::vector<Var> out = {W_f, U_f, b_f, W_i, U_i, b_i, W_c, U_c, b_c, W_o, U_o, b_o, W_d, b_d};
        for (std::size_t l = 0; l < head_W.size(); ++l) {
            out.push_back(head_W[l]);
            out.push_back(head_b[l]);
        }
        out.push_back(W_y);
        out.push_back(b_y);
        return out;
    }
};

inline BoundParams bind(Tape& tape, const TlstmParams& p, bool requires_grad) {
    BoundParams b;
    auto v = [&](const Tensor& t) { return tape.leaf(t, requires_grad); };
    b.W_f = v(p.W_f); b.U_f = v(p.U_f); b.b_f = v(p.b_f);
    b.W_i = v(p.W_i); b.U_i = v(p.U_i); b.b_i = v(p.b_i);
    b.W_c = v(p.W_c); b.U_c = v(p.U_c); b.b_c = v(p.b_c);
    b.W_o = v(p.W_o); b.U_o = v(p.U_o); b.b_o = v(p.b_o);
    b.W_d = v(p.W_d); b.b_d = v(p.b_d);
    for (std::size_t l = 0; l < p.head_W.size(); ++l) {
        b.head_W.push_back(v(p.head_W[l]));
        b.head_b.push_back(v(p.head_b[l]));
    }
    b.W_y = v(p.W_y); b.b_y = v(p.b_y);
    return b;
}

/// Flattened gradients of every bound parameter, matching TlstmParams::flatten().
inline std::vector<double> gather_gradients(const Tape& tape, const BoundParams& bound) {
    std::vector<double> out;
    for (Var v : bound.all()) {
        const auto g = tape.grad(v);
        out.insert(out.end(), g.data.begin(), g.data.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cells

/// (C, h): cell memory and hidden state, H x B.
struct CellState {
    Var C;
    Var h;
};

inline CellState zero_state(Tape& tape, std::size_t hidden, std::size_t batch) {
    return {tape.constant(Tensor(hidden, batch)), tape.constant(Tensor(hidden, batch))};
}

/// Standard LSTM step on memory C and hidden state h.
inline CellState lstm_cell(Tape& t, const BoundParams& p, Var x, CellState s) {
    auto gate = [&](Var W, Var U, Var b) { return t.add(t.add(t.matmul(W, x), t.matmul(U, s.h)), b); };
    const Var f = t.sigmoid(gate(p.W_f, p.U_f, p.b_f));
    const Var i = t.sigmoid(gate(p.W_i, p.U_i, p.b_i));
    const Var candidate = t.tanh(gate(p.W_c, p.U_c, p.b_c));
    const Var o = t.sigmoid(gate(p.W_o, p.U_o, p.b_o));
    const Var C = t.add(t.hadamard(f, s.C), t.hadamard(i, candidate));
    const Var h = t.hadamard(o, t.tanh(C));
    return {C, h};
}

/// Subspace split of the previous memory.
struct MemoryDecomposition {
    Var short_term;             // tanh(W_d C + b_d)
    Var discounted_short_term;  // short_term scaled by g(delta) per column
    Var long_term;              // C - short_term
    Var adjusted;               // long_term + discounted_short_term
};

/// `discount` is a 1 x B row of g(delta) values, one per sample.
inline MemoryDecomposition decompose_memory(Tape& t, const BoundParams& p, Var C, Var discount) {
    MemoryDecomposition m;
    m.short_term = t.tanh(t.add(t.matmul(p.W_d, C), p.b_d));
    m.discounted_short_term = t.hadamard(m.short_term, discount);
    m.long_term = t.subtract(C, m.short_term);
    m.adjusted = t.add(m.long_term, m.discounted_short_term);
    return m;
}

inline Var discount_row(Tape& t, std::span<const int> deltas, DecayKind kind) {
    Tensor g(1, deltas.size());
    for (std::size_t j = 0; j < deltas.size(); ++j) g.data[j] = decay(kind, static_cast<double>(deltas[j]));
    return t.constant(std::move(g));
}

/// Time-aware step: the previous memory is decomposed and its short-term part
/// discounted by g(delta) before the standard LSTM update.
inline CellState tlstm_cell(Tape& t, const BoundParams& p, Var x, std::span<const int> deltas, CellState s,
                            DecayKind kind) {
    const auto m = decompose_memory(t, p, s.C, discount_row(t, deltas, kind));
    return lstm_cell(t, p, x, CellState{m.adjusted, s.h});
}

// ---------------------------------------------------------------------------
// Sequence network

/// Samples of one input length, standardized and laid out column-wise.
struct Batch {
    std::size_t length = 0;
    std::size_t size = 0;
    std::vector<Tensor> inputs;                  // length tensors, D x size
    std::vector<std::vector<int>> intervals;     // length rows of size entries
    Tensor targets;                              // 1 x size, standardized SE
};

inline Batch make_batch(std::span<const Sample* const> samples, const Standardizer& standardizer) {
    if (samples.empty()) throw ShapeError("make_batch: empty batch");
    if (!standardizer.fitted()) throw StateError("make_batch: standardizer has not been fitted");
    if (standardizer.dims() != kFeatureDim) throw SchemaError("make_batch: standardizer dimension mismatch");
    Batch b;
    b.length = samples.front()->length();
    b.size = samples.size();
    b.inputs.assign(b.length, Tensor(kFeatureDim, b.size));
    b.intervals.assign(b.length, std::vector<int>(b.size));
    b.targets = Tensor(1, b.size);
    for (std::size_t j = 0; j < b.size; ++j) {
        const Sample& s = *samples[j];
        if (s.length() != b.length) throw ShapeError("make_batch: mixed sequence lengths");
        if (s.intervals.size() != s.length()) throw ShapeError("make_batch: inputs and intervals differ in length");
        for (std::size_t t = 0; t < b.length; ++t) {
            const auto z = standardizer.apply(s.inputs[t]);
            for (std::size_t d = 0; d < kFeatureDim; ++d) b.inputs[t](d, j) = z[d];
            b.intervals[t][j] = s.intervals[t];
        }
        b.targets.data[j] = standardizer.standardize_se(s.label_se);
    }
    return b;
}

/// Dense head on the final hidden state: optional tanh layers, then affine output.
inline Var dense_head(Tape& t, const BoundParams& p, Var h) {
    Var z = h;
    for (std::size_t l = 0; l < p.head_W.size(); ++l) z = t.tanh(t.add(t.matmul(p.head_W[l], z), p.head_b[l]));
    return t.add(t.matmul(p.W_y, z), p.b_y);
}

/// Runs the network over a batch; returns 1 x B standardized predictions.
/// Step t consumes input t and the gap to the following record, so the last
/// step carries the prediction horizon.
inline Var forward(Tape& t, const BoundParams& p, const Batch& batch, DecayKind kind, std::size_t hidden_size) {
    if (batch.length == 0) throw ShapeError("forward: empty sequence");
    CellState s = zero_state(t, hidden_size, batch.size);
    for (std::size_t step = 0; step < batch.length; ++step) {
        const Var x = t.constant(batch.inputs[step]);
        s = tlstm_cell(t, p, x, batch.intervals[step], s, kind);
    }
    return dense_head(t, p, s.h);
}

/// Standardized predictions for a batch, without gradient bookkeeping.
inline std::vector<double> predict_batch(const TlstmParams& params, const Batch& batch, DecayKind kind) {
    Tape tape;
    const auto bound = bind(tape, params, false);
    const Var y = forward(tape, bound, batch, kind, params.hidden_size);
    return tape.value(y).data;
}

/// Standardized prediction for one sample.
inline double predict_standardized(const Sample& sample, const TlstmParams& params, const Standardizer& standardizer,
                                   DecayKind kind) {
    if (sample.inputs.empty() || sample.intervals.size() != sample.inputs.size())
        throw ShapeError("forward: inputs and intervals must be nonempty and of equal length");
    const Sample* one[] = {&sample};
    return predict_batch(params, make_batch(one, standardizer), kind).front();
}

/// SE in diopters `horizon` quarters after the last record. `gaps` holds the
/// T-1 intervals between consecutive history records.
inline double predict_horizon(std::span<const FeatureVector> history, std::span<const int> gaps, int horizon,
                              const TlstmParams& params, const Standardizer& standardizer, DecayKind kind) {
    if (!standardizer.fitted()) throw StateError("predict_horizon: standardizer has not been fitted");
    if (history.empty()) throw ShapeError("predict_horizon: empty history");
    if (gaps.size() + 1 != history.size()) throw ShapeError("predict_horizon: need one gap per consecutive record pair");
    if (horizon < 1) throw DomainError("predict_horizon: horizon must be >= 1 quarter");
    Sample s;
    s.inputs.assign(history.begin(), history.end());
    s.intervals.assign(gaps.begin(), gaps.end());
    s.intervals.push_back(horizon);
    return standardizer.inverse_standardize_se(predict_standardized(s, params, standardizer, kind));
}

// ---------------------------------------------------------------------------
// Checkpoint container

struct Checkpoint {
    TlstmParams params;
    DecayKind kind = DecayKind::log_decay;
    /// Path of the standardizer file, relative to the checkpoint.
    std::string standardizer_ref;
};

inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(std::ostream& out, const Checkpoint& ck) {
    ck.params.validate();
    out << "tlstm-checkpoint\n"
        << "version " << kCheckpointVersion << '\n'
        << "input_size " << ck.params.input_size << '\n'
        << "hidden_size " << ck.params.hidden_size << '\n'
        << "head_layers " << ck.params.head_layers() << '\n'
        << "decay " << to_string(ck.kind) << '\n'
        << "standardizer " << (ck.standardizer_ref.empty() ? "-" : ck.standardizer_ref) << '\n';
    char buf[32];
    for (const auto& [name, t] : ck.params.named()) {
        out << "tensor " << name << ' ' << t->rows << ' ' << t->cols << '\n';
        for (std::size_t r = 0; r < t->rows; ++r) {
            for (std::size_t c = 0; c < t->cols; ++c) {
                const auto res = std::to_chars(buf, buf + sizeof buf, (*t)(r, c));
                out << (c ? " " : "") << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
            }
            out << '\n';
        }
    }
    out << "end\n";
}

inline Checkpoint load_checkpoint(std::istream& in) {
    auto fail = [](const std::string& what) -> Checkpoint { throw SchemaError("checkpoint: " + what); };
    std::string magic, key;
    if (!(in >> magic) || magic != "tlstm-checkpoint") return fail("missing header");
    int version = 0;
    std::size_t D = 0, H = 0, layers = 0;
    std::string kind, ref;
    if (!(in >> key >> version) || key != "version") return fail("missing version");
    if (version != kCheckpointVersion) return fail("unsupported version " + std::to_string(version));
    if (!(in >> key >> D) || key != "input_size") return fail("missing input_size");
    if (!(in >> key >> H) || key != "hidden_size") return fail("missing hidden_size");
    if (!(in >> key >> layers) || key != "head_layers") return fail("missing head_layers");
    if (!(in >> key >> kind) || key != "decay") return fail("missing decay");
    if (!(in >> key >> ref) || key != "standardizer") return fail("missing standardizer");

    Checkpoint ck;
    try {
        ck.kind = parse_decay_kind(kind);
    } catch (const ConfigError& e) {
        return fail(e.what());
    }
    ck.standardizer_ref = ref == "-" ? "" : ref;
    ck.params = TlstmParams::zeros(D, H, layers);
    for (auto& [name, t] : ck.params.named()) {
        std::string tag, got;
        std::size_t r = 0, c = 0;
        if (!(in >> tag >> got >> r >> c) || tag != "tensor") return fail("expected tensor " + name);
        if (got != name) return fail("expected tensor " + name + ", found " + got);
        if (r != t->rows || c != t->cols) return fail("tensor " + name + " has wrong shape");
        std::string token;
        for (auto& x : t->data) {
            if (!(in >> token)) return fail("truncated tensor " + name);
            const auto res = std::from_chars(token.data(), token.data() + token.size(), x);
            if (res.ec != std::errc{} || res.ptr != token.data() + token.size())
                return fail("bad number '" + token + "' in " + name);
        }
    }
    if (!(in >> key) || key != "end") return fail("missing end marker");
    ck.params.validate();
    return ck;
}

} // namespace tlstm
