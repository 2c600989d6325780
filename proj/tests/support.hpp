#pragma once

// Test-side reference evaluators written directly from the cell equations,
// sharing nothing with the tape beyond the flattened parameter layout.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "tlstm/model.hpp"

namespace ref {

template <class R>
struct Matrix {
    std::size_t rows = 0, cols = 0;
    std::vector<R> v;
    R at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

template <class R>
struct Weights {
    Matrix<R> Wf, Uf, bf, Wi, Ui, bi, Wc, Uc, bc, Wo, Uo, bo, Wd, bd;
    std::vector<Matrix<R>> hW, hb;
    Matrix<R> Wy, by;
};

// Unpacks a flat vector in the checkpoint tensor order.
template <class R>
Weights<R> unpack(const std::vector<R>& flat, std::size_t D, std::size_t H, std::size_t head_layers) {
    Weights<R> w;
    std::size_t pos = 0;
    auto take = [&](std::size_t r, std::size_t c) {
        Matrix<R> m{r, c, std::vector<R>(flat.begin() + pos, flat.begin() + pos + r * c)};
        pos += r * c;
        return m;
    };
    w.Wf = take(H, D), w.Uf = take(H, H), w.bf = take(H, 1);
    w.Wi = take(H, D), w.Ui = take(H, H), w.bi = take(H, 1);
    w.Wc = take(H, D), w.Uc = take(H, H), w.bc = take(H, 1);
    w.Wo = take(H, D), w.Uo = take(H, H), w.bo = take(H, 1);
    w.Wd = take(H, H), w.bd = take(H, 1);
    for (std::size_t l = 0; l < head_layers; ++l) {
        w.hW.push_back(take(H, H));
        w.hb.push_back(take(H, 1));
    }
    w.Wy = take(1, H), w.by = take(1, 1);
    return w;
}

template <class R>
std::vector<R> affine(const Matrix<R>& W, const std::vector<R>& x, const Matrix<R>& U, const std::vector<R>& h,
                      const Matrix<R>& b) {
    std::vector<R> out(W.rows);
    for (std::size_t r = 0; r < W.rows; ++r) {
        R acc = b.v[r];
        for (std::size_t c = 0; c < W.cols; ++c) acc += W.at(r, c) * x[c];
        for (std::size_t c = 0; c < U.cols; ++c) acc += U.at(r, c) * h[c];
        out[r] = acc;
    }
    return out;
}

template <class R>
R sigmoid(R z) {
    return R(1) / (R(1) + std::exp(-z));
}

template <class R>
R discount(tlstm::DecayKind kind, R delta) {
    switch (kind) {
        case tlstm::DecayKind::log_decay: return R(1) / std::log(std::numbers::e_v<R> + delta);
        case tlstm::DecayKind::inverse_decay: return R(1) / delta;
        case tlstm::DecayKind::none: return R(1);
    }
    return R(1);
}

// One sequence. With time_aware false the memory goes into the gates untouched.
template <class R>
R predict(const Weights<R>& w, const std::vector<std::vector<R>>& xs, const std::vector<int>& deltas,
          tlstm::DecayKind kind, bool time_aware = true) {
    const std::size_t H = w.bf.rows;
    std::vector<R> C(H, R(0)), h(H, R(0));
    const Matrix<R> none{H, 0, {}};
    const std::vector<R> empty;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        std::vector<R> Cprev = C;
        if (time_aware) {
            const auto pre = affine(w.Wd, C, none, empty, w.bd);
            const R g = discount(kind, static_cast<R>(deltas[t]));
            for (std::size_t k = 0; k < H; ++k) {
                const R s = std::tanh(pre[k]);
                Cprev[k] = (C[k] - s) + s * g;
            }
        }
        const auto f = affine(w.Wf, xs[t], w.Uf, h, w.bf);
        const auto i = affine(w.Wi, xs[t], w.Ui, h, w.bi);
        const auto c = affine(w.Wc, xs[t], w.Uc, h, w.bc);
        const auto o = affine(w.Wo, xs[t], w.Uo, h, w.bo);
        for (std::size_t k = 0; k < H; ++k) {
            C[k] = sigmoid(f[k]) * Cprev[k] + sigmoid(i[k]) * std::tanh(c[k]);
            h[k] = sigmoid(o[k]) * std::tanh(C[k]);
        }
    }
    std::vector<R> z = h;
    for (std::size_t l = 0; l < w.hW.size(); ++l) {
        const auto pre = affine(w.hW[l], z, none, empty, w.hb[l]);
        for (std::size_t k = 0; k < H; ++k) z[k] = std::tanh(pre[k]);
    }
    R y = w.by.v[0];
    for (std::size_t k = 0; k < H; ++k) y += w.Wy.v[k] * z[k];
    return y;
}

// Batch MSE over the columns of a model batch.
template <class R>
R batch_loss(const std::vector<R>& flat, const tlstm::TlstmParams& shape, const tlstm::Batch& batch,
             tlstm::DecayKind kind) {
    const auto w = unpack(flat, shape.input_size, shape.hidden_size, shape.head_layers());
    R acc = 0;
    for (std::size_t j = 0; j < batch.size; ++j) {
        std::vector<std::vector<R>> xs(batch.length, std::vector<R>(shape.input_size));
        std::vector<int> deltas(batch.length);
        for (std::size_t t = 0; t < batch.length; ++t) {
            for (std::size_t d = 0; d < shape.input_size; ++d) xs[t][d] = batch.inputs[t](d, j);
            deltas[t] = batch.intervals[t][j];
        }
        const R e = predict(w, xs, deltas, kind) - static_cast<R>(batch.targets.data[j]);
        acc += e * e;
    }
    return acc / static_cast<R>(batch.size);
}

// Central differences of the extended-precision loss at the given coordinates.
inline double max_relative_error(const tlstm::TlstmParams& params, const tlstm::Batch& batch,
                                 tlstm::DecayKind kind, const std::vector<double>& analytic,
                                 const std::vector<std::size_t>& coords, long double h = 1e-5L) {
    const auto flat = params.flatten();
    std::vector<long double> theta(flat.begin(), flat.end());
    double worst = 0.0;
    for (std::size_t j : coords) {
        const long double saved = theta[j];
        theta[j] = saved + h;
        const long double up = batch_loss(theta, params, batch, kind);
        theta[j] = saved - h;
        const long double down = batch_loss(theta, params, batch, kind);
        theta[j] = saved;
        const double numeric = static_cast<double>((up - down) / (2 * h));
        worst = std::max(worst, tlstm::ad::relative_error(analytic[j], numeric));
    }
    return worst;
}

} // namespace ref
