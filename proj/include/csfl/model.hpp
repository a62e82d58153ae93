// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "csfl/errors.hpp"
#include "csfl/linalg.hpp"
#include "csfl/rng.hpp"

namespace csfl {

enum class ActivationFn { kRelu, kIdentity };

// Layer 1 is always the encoder (wide linear over numeric features plus two
// embedding lookups, concatenated). Layers 2..n are dense layers: the client
// hidden stack, then the server hidden stack, then the output layer.
struct ArchSpec {
    int num_numeric = 6;
    int vocab1 = 4;
    int vocab2 = 3;
    int wide_out = 8;
    int embed_dim1 = 4;
    int embed_dim2 = 4;
    std::vector<int> client_hidden = {32, 32, 16};
    std::vector<int> server_hidden = {32, 16};
    int output_dim = 1;
    int split_layer_index = 4;  // last client-side layer

    int dense_count() const {
        return static_cast<int>(client_hidden.size() + server_hidden.size()) + 1;
    }
    int total_layers() const { return 1 + dense_count(); }
    int encoder_out_width() const { return wide_out + embed_dim1 + embed_dim2; }

    // Output width of dense layer at global index `layer` (2-based after encoder).
    int dense_out_width(int layer) const {
        const int d = layer - 2;
        const int nc = static_cast<int>(client_hidden.size());
        const int ns = static_cast<int>(server_hidden.size());
        if (d < nc) return client_hidden[static_cast<std::size_t>(d)];
        if (d < nc + ns) return server_hidden[static_cast<std::size_t>(d - nc)];
        return output_dim;
    }

    int layer_output_width(int layer) const {
        check_layer(layer);
        return layer == 1 ? encoder_out_width() : dense_out_width(layer);
    }

    // Width fed into dense layer `layer` (>= 2).
    int layer_input_width(int layer) const {
        check_layer(layer);
        if (layer < 2) throw ContractError("layer 1 (encoder) consumes a raw batch, not a width");
        return layer_output_width(layer - 1);
    }

    ActivationFn dense_activation(int layer) const {
        return layer == total_layers() ? ActivationFn::kIdentity : ActivationFn::kRelu;
    }

    void check_layer(int layer) const {
        if (layer < 1 || layer > total_layers()) {
            throw ContractError("layer index " + std::to_string(layer) + " outside [1, " +
                                std::to_string(total_layers()) + "]");
        }
    }

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v < 1) throw ConfigError(std::string("arch: ") + name + " must be >= 1");
        };
        positive(num_numeric, "num_numeric");
        positive(vocab1, "vocab1");
        positive(vocab2, "vocab2");
        positive(wide_out, "wide_out");
        positive(embed_dim1, "embed_dim1");
        positive(embed_dim2, "embed_dim2");
        positive(output_dim, "output_dim");
        if (client_hidden.empty()) throw ConfigError("arch: client_hidden must not be empty");
        for (int w : client_hidden) positive(w, "client_hidden width");
        for (int w : server_hidden) positive(w, "server_hidden width");
        if (split_layer_index < 1 || split_layer_index >= total_layers()) {
            throw ConfigError("arch: split_layer_index " + std::to_string(split_layer_index) +
                              " must lie in [1, " + std::to_string(total_layers() - 1) + ")" +
                              " (total layers " + std::to_string(total_layers()) + ")");
        }
    }

    friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

struct EncoderParams {
    Matrix wide_weights;            // num_numeric x wide_out
    std::vector<double> wide_bias;  // wide_out
    Matrix embed_table1;            // vocab1 x embed_dim1
    Matrix embed_table2;            // vocab2 x embed_dim2

    friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

struct DenseLayer {
    Matrix weights;  // in x out
    std::vector<double> bias;
    ActivationFn activation = ActivationFn::kRelu;

    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

// Full ordered layer stack. Client/server ownership is a view defined by
// arch.split_layer_index; both sides address layers by the same global index.
struct SplitModelParams {
    ArchSpec arch;
    EncoderParams encoder;
    std::vector<DenseLayer> dense;

    friend bool operator==(const SplitModelParams&, const SplitModelParams&) = default;
};

// One minibatch of raw features.
struct RawBatch {
    Matrix numeric;  // batch x num_numeric
    std::vector<int> cat1;
    std::vector<int> cat2;

    std::size_t batch() const { return numeric.rows; }
};

// Activation after some layer. At the split layer this is the smashed data;
// at a partition point inside the client stack it is the intermediate smashed
// data relayed between users.
struct Activation {
    Matrix values;                 // batch x width
    int produced_after_layer = 0;  // layer index
};

inline SplitModelParams init_params(const ArchSpec& arch, std::uint64_t seed) {
    arch.validate();
    Rng rng(seed);
    SplitModelParams p;
    p.arch = arch;

    auto glorot = [&rng](std::size_t fan_in, std::size_t fan_out) {
        Matrix m(fan_in, fan_out);
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (double& v : m.data) v = rng.uniform(-bound, bound);
        return m;
    };

    p.encoder.wide_weights = glorot(static_cast<std::size_t>(arch.num_numeric),
                                    static_cast<std::size_t>(arch.wide_out));
    p.encoder.wide_bias.assign(static_cast<std::size_t>(arch.wide_out), 0.0);
    p.encoder.embed_table1 = Matrix(static_cast<std::size_t>(arch.vocab1),
                                    static_cast<std::size_t>(arch.embed_dim1));
    for (double& v : p.encoder.embed_table1.data) v = rng.uniform(-0.05, 0.05);
    p.encoder.embed_table2 = Matrix(static_cast<std::size_t>(arch.vocab2),
                                    static_cast<std::size_t>(arch.embed_dim2));
    for (double& v : p.encoder.embed_table2.data) v = rng.uniform(-0.05, 0.05);

    for (int layer = 2; layer <= arch.total_layers(); ++layer) {
        DenseLayer d;
        d.weights = glorot(static_cast<std::size_t>(arch.layer_input_width(layer)),
                           static_cast<std::size_t>(arch.layer_output_width(layer)));
        d.bias.assign(static_cast<std::size_t>(arch.layer_output_width(layer)), 0.0);
        d.activation = arch.dense_activation(layer);
        p.dense.push_back(std::move(d));
    }
    return p;
}

// Cached state from a traced forward pass; required input to backward_range.
struct ForwardTrace {
    int from_layer = 0;
    int to_layer = 0;
    RawBatch raw;               // populated iff from_layer == 1
    Matrix range_input;         // populated iff from_layer > 1
    std::vector<Matrix> dense_inputs;  // input to each dense layer in range
    std::vector<Matrix> dense_pre;     // pre-activation per dense layer in range
    Matrix output;
    std::size_t batch = 0;
};

namespace detail {

inline void check_raw_batch(const ArchSpec& arch, const RawBatch& input) {
    if (input.numeric.cols != static_cast<std::size_t>(arch.num_numeric)) {
        throw DimensionError("raw batch numeric width " + std::to_string(input.numeric.cols) +
                             " != arch num_numeric " + std::to_string(arch.num_numeric));
    }
    if (input.cat1.size() != input.numeric.rows || input.cat2.size() != input.numeric.rows) {
        throw DimensionError("raw batch categorical column length mismatch");
    }
    if (!all_finite(input.numeric)) throw NumericError("raw batch contains non-finite values");
    for (int idx : input.cat1) {
        if (idx < 0 || idx >= arch.vocab1) throw ContractError("cat1 index out of vocabulary");
    }
    for (int idx : input.cat2) {
        if (idx < 0 || idx >= arch.vocab2) throw ContractError("cat2 index out of vocabulary");
    }
}

inline Matrix encoder_forward(const SplitModelParams& p, const RawBatch& input) {
    const ArchSpec& arch = p.arch;
    const std::size_t batch = input.batch();
    Matrix out(batch, static_cast<std::size_t>(arch.encoder_out_width()));
    const Matrix wide = matmul(input.numeric, p.encoder.wide_weights);
    const std::size_t w = static_cast<std::size_t>(arch.wide_out);
    const std::size_t e1 = static_cast<std::size_t>(arch.embed_dim1);
    const std::size_t e2 = static_cast<std::size_t>(arch.embed_dim2);
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            out(i, j) = wide(i, j) + p.encoder.wide_bias[j];
        }
        const std::size_t r1 = static_cast<std::size_t>(input.cat1[i]);
        for (std::size_t j = 0; j < e1; ++j) {
            out(i, w + j) = p.encoder.embed_table1(r1, j);
        }
        const std::size_t r2 = static_cast<std::size_t>(input.cat2[i]);
        for (std::size_t j = 0; j < e2; ++j) {
            out(i, w + e1 + j) = p.encoder.embed_table2(r2, j);
        }
    }
    return out;
}

inline ForwardTrace forward_impl(const SplitModelParams& p, int from_layer, int to_layer,
                                 const RawBatch* raw, const Activation* act) {
    const ArchSpec& arch = p.arch;
    arch.check_layer(from_layer);
    arch.check_layer(to_layer);
    if (from_layer > to_layer) throw ContractError("forward_range: from_layer > to_layer");

    ForwardTrace trace;
    trace.from_layer = from_layer;
    trace.to_layer = to_layer;

    Matrix current;
    if (from_layer == 1) {
        if (raw == nullptr) throw ContractError("forward_range from layer 1 needs a raw batch");
        check_raw_batch(arch, *raw);
        trace.raw = *raw;
        trace.batch = raw->batch();
        current = encoder_forward(p, *raw);
    } else {
        if (act == nullptr) throw ContractError("forward_range past layer 1 needs an activation");
        if (act->produced_after_layer != from_layer - 1) {
            throw ContractError("activation produced after layer " +
                                std::to_string(act->produced_after_layer) +
                                " cannot feed range starting at layer " +
                                std::to_string(from_layer));
        }
        if (act->values.cols != static_cast<std::size_t>(arch.layer_input_width(from_layer))) {
            throw DimensionError("activation width " + std::to_string(act->values.cols) +
                                 " != input width of layer " + std::to_string(from_layer));
        }
        if (!all_finite(act->values)) throw NumericError("input activation is non-finite");
        trace.range_input = act->values;
        trace.batch = act->values.rows;
        current = act->values;
    }

    const int first_dense = std::max(from_layer, 2);
    for (int layer = first_dense; layer <= to_layer; ++layer) {
        const DenseLayer& d = p.dense[static_cast<std::size_t>(layer - 2)];
        trace.dense_inputs.push_back(current);
        Matrix z = matmul(current, d.weights);
        for (std::size_t i = 0; i < z.rows; ++i) {
            for (std::size_t j = 0; j < z.cols; ++j) {
                z(i, j) += d.bias[j];
            }
        }
        trace.dense_pre.push_back(z);
        if (d.activation == ActivationFn::kRelu) {
            for (double& v : z.data) v = v > 0.0 ? v : 0.0;
        }
        current = std::move(z);
    }
    trace.output = std::move(current);
    return trace;
}

}  // namespace detail

inline ForwardTrace forward_range_traced(const SplitModelParams& p, int from_layer, int to_layer,
                                         const RawBatch& input) {
    return detail::forward_impl(p, from_layer, to_layer, &input, nullptr);
}

inline ForwardTrace forward_range_traced(const SplitModelParams& p, int from_layer, int to_layer,
                                         const Activation& input) {
    return detail::forward_impl(p, from_layer, to_layer, nullptr, &input);
}

inline Activation forward_range(const SplitModelParams& p, int from_layer, int to_layer,
                                const RawBatch& input) {
    return Activation{forward_range_traced(p, from_layer, to_layer, input).output, to_layer};
}

inline Activation forward_range(const SplitModelParams& p, int from_layer, int to_layer,
                                const Activation& input) {
    return Activation{forward_range_traced(p, from_layer, to_layer, input).output, to_layer};
}

struct EncoderGrads {
    Matrix wide_weights;
    std::vector<double> wide_bias;
    Matrix embed_table1;
    Matrix embed_table2;
};

struct DenseGrads {
    Matrix weights;
    std::vector<double> bias;
};

// Parameter gradients for a layer range plus the gradient flowing out of the
// range's input, which chains server -> helper -> bottleneck backward passes.
struct GradientBundle {
    int from_layer = 0;
    int to_layer = 0;
    std::optional<EncoderGrads> encoder;  // present iff from_layer == 1
    std::vector<DenseGrads> dense;        // layers max(from,2)..to, in order
    Matrix input_gradient;  // batch x input width (numeric width when from_layer == 1)
};

inline GradientBundle backward_range(const SplitModelParams& p, int from_layer, int to_layer,
                                     const ForwardTrace& state, const Matrix& upstream_grad) {
    const ArchSpec& arch = p.arch;
    if (state.from_layer != from_layer || state.to_layer != to_layer) {
        throw ContractError("backward_range: cached state covers [" +
                            std::to_string(state.from_layer) + ", " +
                            std::to_string(state.to_layer) + "], requested [" +
                            std::to_string(from_layer) + ", " + std::to_string(to_layer) + "]");
    }
    if (!upstream_grad.same_shape(state.output)) {
        throw DimensionError("upstream gradient shape does not match range output");
    }

    GradientBundle bundle;
    bundle.from_layer = from_layer;
    bundle.to_layer = to_layer;

    Matrix delta = upstream_grad;
    const int first_dense = std::max(from_layer, 2);
    bundle.dense.resize(static_cast<std::size_t>(std::max(0, to_layer - first_dense + 1)));
    for (int layer = to_layer; layer >= first_dense; --layer) {
        const std::size_t k = static_cast<std::size_t>(layer - first_dense);
        const DenseLayer& d = p.dense[static_cast<std::size_t>(layer - 2)];
        const Matrix& pre = state.dense_pre[k];
        if (d.activation == ActivationFn::kRelu) {
            for (std::size_t i = 0; i < delta.data.size(); ++i) {
                if (pre.data[i] <= 0.0) delta.data[i] = 0.0;
            }
        }
        DenseGrads g;
        g.weights = matmul_at_b(state.dense_inputs[k], delta);
        g.bias = column_sums(delta);
        bundle.dense[k] = std::move(g);
        delta = matmul_a_bt(delta, d.weights);
    }

    if (from_layer == 1) {
        const RawBatch& raw = state.raw;
        const std::size_t w = static_cast<std::size_t>(arch.wide_out);
        const std::size_t e1 = static_cast<std::size_t>(arch.embed_dim1);
        const std::size_t e2 = static_cast<std::size_t>(arch.embed_dim2);
        Matrix u_wide(delta.rows, w);
        for (std::size_t i = 0; i < delta.rows; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                u_wide(i, j) = delta(i, j);
            }
        }
        EncoderGrads eg;
        eg.wide_weights = matmul_at_b(raw.numeric, u_wide);
        eg.wide_bias = column_sums(u_wide);
        // Sparse embedding rows accumulated densely; vocabularies are tiny.
        eg.embed_table1 = Matrix(p.encoder.embed_table1.rows, p.encoder.embed_table1.cols);
        eg.embed_table2 = Matrix(p.encoder.embed_table2.rows, p.encoder.embed_table2.cols);
        for (std::size_t i = 0; i < delta.rows; ++i) {
            const std::size_t r1 = static_cast<std::size_t>(raw.cat1[i]);
            for (std::size_t j = 0; j < e1; ++j) {
                eg.embed_table1(r1, j) += delta(i, w + j);
            }
            const std::size_t r2 = static_cast<std::size_t>(raw.cat2[i]);
            for (std::size_t j = 0; j < e2; ++j) {
                eg.embed_table2(r2, j) += delta(i, w + e1 + j);
            }
        }
        bundle.encoder = std::move(eg);
        bundle.input_gradient = matmul_a_bt(u_wide, p.encoder.wide_weights);
    } else {
        bundle.input_gradient = std::move(delta);
    }
    return bundle;
}

inline std::pair<double, Matrix> mse_loss_and_grad(const Matrix& pred, const Matrix& target) {
    if (!pred.same_shape(target)) throw DimensionError("mse: prediction/target shape mismatch");
    if (pred.rows == 0) throw ContractError("mse: empty batch");
    const double n = static_cast<double>(pred.rows);
    double loss = 0.0;
    Matrix grad(pred.rows, pred.cols);
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double r = pred.data[i] - target.data[i];
        loss += r * r;
        grad.data[i] = 2.0 * r / n;
    }
    return {loss / n, grad};
}

inline double mae(const Matrix& pred, const Matrix& target) {
    if (!pred.same_shape(target)) throw DimensionError("mae: prediction/target shape mismatch");
    if (pred.data.empty()) throw ContractError("mae: empty batch");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        sum += std::fabs(pred.data[i] - target.data[i]);
    }
    return sum / static_cast<double>(pred.data.size());
}

// p <- p - lr * g for the layers the bundle covers; other layers untouched.
inline SplitModelParams sgd_step(const SplitModelParams& params, const GradientBundle& grads,
                                 double lr) {
    if (lr <= 0.0) throw ContractError("sgd_step: learning rate must be positive");
    SplitModelParams out = params;

    auto axpy_matrix = [lr](Matrix& dst, const Matrix& g, const char* what) {
        if (!dst.same_shape(g)) throw DimensionError(std::string("sgd_step: ") + what);
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] -= lr * g.data[i];
    };
    auto axpy_vector = [lr](std::vector<double>& dst, const std::vector<double>& g,
                            const char* what) {
        if (dst.size() != g.size()) throw DimensionError(std::string("sgd_step: ") + what);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= lr * g[i];
    };

    if (grads.from_layer == 1) {
        if (!grads.encoder) throw ContractError("sgd_step: bundle from layer 1 lacks encoder grads");
        axpy_matrix(out.encoder.wide_weights, grads.encoder->wide_weights, "wide weights");
        axpy_vector(out.encoder.wide_bias, grads.encoder->wide_bias, "wide bias");
        axpy_matrix(out.encoder.embed_table1, grads.encoder->embed_table1, "embed table 1");
        axpy_matrix(out.encoder.embed_table2, grads.encoder->embed_table2, "embed table 2");
    }
    const int first_dense = std::max(grads.from_layer, 2);
    for (int layer = first_dense; layer <= grads.to_layer; ++layer) {
        const std::size_t k = static_cast<std::size_t>(layer - first_dense);
        DenseLayer& d = out.dense[static_cast<std::size_t>(layer - 2)];
        axpy_matrix(d.weights, grads.dense[k].weights, "dense weights");
        axpy_vector(d.bias, grads.dense[k].bias, "dense bias");
    }
    return out;
}

// Number of parameters in layers [from, to]; layer 1 counts the full encoder.
inline std::size_t param_count(const ArchSpec& arch, int from_layer, int to_layer) {
    std::size_t n = 0;
    if (from_layer == 1) {
        n += static_cast<std::size_t>(arch.num_numeric) * static_cast<std::size_t>(arch.wide_out);
        n += static_cast<std::size_t>(arch.wide_out);
        n += static_cast<std::size_t>(arch.vocab1) * static_cast<std::size_t>(arch.embed_dim1);
        n += static_cast<std::size_t>(arch.vocab2) * static_cast<std::size_t>(arch.embed_dim2);
    }
    for (int layer = std::max(from_layer, 2); layer <= to_layer; ++layer) {
        n += static_cast<std::size_t>(arch.layer_input_width(layer)) *
                 static_cast<std::size_t>(arch.layer_output_width(layer)) +
             static_cast<std::size_t>(arch.layer_output_width(layer));
    }
    return n;
}

// Scatter a bundle's parameter gradients into a flat vector laid out over
// layers [from, to]. Layers the bundle does not cover stay untouched, which
// is what the gradient-similarity re-matching signature needs.
inline void accumulate_flat_gradient(const ArchSpec& arch, int from_layer, int to_layer,
                                     const GradientBundle& bundle, std::vector<double>& flat) {
    if (flat.size() != param_count(arch, from_layer, to_layer)) {
        throw DimensionError("accumulate_flat_gradient: flat vector size mismatch");
    }
    std::size_t offset = 0;
    auto add_matrix = [&](const Matrix* g, std::size_t count) {
        if (g != nullptr) {
            for (std::size_t i = 0; i < count; ++i) flat[offset + i] += g->data[i];
        }
        offset += count;
    };
    auto add_vector = [&](const std::vector<double>* g, std::size_t count) {
        if (g != nullptr) {
            for (std::size_t i = 0; i < count; ++i) flat[offset + i] += (*g)[i];
        }
        offset += count;
    };

    if (from_layer == 1) {
        const EncoderGrads* eg = bundle.from_layer == 1 && bundle.encoder ? &*bundle.encoder : nullptr;
        add_matrix(eg ? &eg->wide_weights : nullptr,
                   static_cast<std::size_t>(arch.num_numeric) * static_cast<std::size_t>(arch.wide_out));
        add_vector(eg ? &eg->wide_bias : nullptr, static_cast<std::size_t>(arch.wide_out));
        add_matrix(eg ? &eg->embed_table1 : nullptr,
                   static_cast<std::size_t>(arch.vocab1) * static_cast<std::size_t>(arch.embed_dim1));
        add_matrix(eg ? &eg->embed_table2 : nullptr,
                   static_cast<std::size_t>(arch.vocab2) * static_cast<std::size_t>(arch.embed_dim2));
    }
    const int bundle_first = std::max(bundle.from_layer, 2);
    for (int layer = std::max(from_layer, 2); layer <= to_layer; ++layer) {
        const DenseGrads* dg = nullptr;
        if (layer >= bundle_first && layer <= bundle.to_layer) {
            dg = &bundle.dense[static_cast<std::size_t>(layer - bundle_first)];
        }
        add_matrix(dg ? &dg->weights : nullptr,
                   static_cast<std::size_t>(arch.layer_input_width(layer)) *
                       static_cast<std::size_t>(arch.layer_output_width(layer)));
        add_vector(dg ? &dg->bias : nullptr, static_cast<std::size_t>(arch.layer_output_width(layer)));
    }
}

}  // namespace csfl
