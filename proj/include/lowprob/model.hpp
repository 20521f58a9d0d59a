#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "lowprob/common.hpp"

namespace lowprob {

// Minimal deterministic decoder-only transformer. Pre-layer-norm blocks with
// learned positional embeddings, causal attention, exact-erf GELU MLPs, a
// final layer norm and an unembed matrix. Only the final-position logits are
// exposed. All arithmetic is 64-bit; weights serialize as little-endian f32.

struct ModelSpec {
    int n_layers = 1;
    int d_model = 16;
    int n_heads = 2;
    int d_mlp = 32;
    int vocab_size = 32;
    int max_seq_len = 16;
    std::string activation = "gelu_exact";

    void validate() const;  // throws input_error
};

struct LayerWeights {
    Eigen::VectorXd ln1_w, ln1_b;
    Eigen::MatrixXd w_q, w_k, w_v, w_o;  // each [d_model x d_model]
    Eigen::VectorXd b_q, b_k, b_v, b_o;
    Eigen::VectorXd ln2_w, ln2_b;
    Eigen::MatrixXd w_in;   // [d_model x d_mlp]
    Eigen::VectorXd b_in;   // [d_mlp]
    Eigen::MatrixXd w_out;  // [d_mlp x d_model]
    Eigen::VectorXd b_out;  // [d_model]
};

struct ModelWeights {
    ModelSpec spec;
    Eigen::MatrixXd token_embedding;       // [vocab_size x d_model]
    Eigen::MatrixXd positional_embedding;  // [max_seq_len x d_model]
    std::vector<LayerWeights> layers;
    Eigen::VectorXd ln_f_w, ln_f_b;
    Eigen::MatrixXd unembed;  // [d_model x vocab_size]

    void validate() const;  // shape consistency + finiteness; throws
};

using TokenSeq = std::vector<int32_t>;

// Flat [n_seqs x k] token layout for batched forward passes.
struct TokenBatch {
    int n_seqs = 0;
    int k = 0;
    std::vector<int32_t> tokens;  // row-major, n_seqs * k

    void resize(int n, int kk) {
        n_seqs = n;
        k = kk;
        tokens.assign(static_cast<size_t>(n) * kk, 0);
    }
    int32_t* row(int i) { return tokens.data() + static_cast<size_t>(i) * k; }
    const int32_t* row(int i) const { return tokens.data() + static_cast<size_t>(i) * k; }
};

double gelu(double z);       // exact z * Phi(z)
double gelu_grad(double z);  // Phi(z) + z * phi(z)

// Residual-stream activation right before the unembed matrix, final position.
Eigen::VectorXd pre_unembed(const ModelWeights& w, const TokenSeq& x);

// Final-position logits; computed as pre_unembed(w, x) * unembed on the same
// code path.
Eigen::VectorXd forward_logits(const ModelWeights& w, const TokenSeq& x);

// Forward from an explicit [k x d_model] embedding-input matrix (token
// embedding rows already summed with positional rows). This is the continuous
// interpolation of the one-hot input that the gradient is defined against.
Eigen::VectorXd forward_logits_from_embedding(const ModelWeights& w, const Eigen::MatrixXd& emb);

// Exact reverse-mode gradient of the target logit with respect to the one-hot
// input encoding: entry (i, v) is the dot product of token-embedding row v
// with the gradient of logit t at the position-i embedding input. Shape
// [k x vocab_size].
Eigen::MatrixXd grad_target_logit(const ModelWeights& w, const TokenSeq& x, int32_t t);

// One forward + one backward sharing intermediates; what the importance
// sampling estimators use per sample.
struct ForwardBackward {
    Eigen::VectorXd logits;
    Eigen::MatrixXd grad;  // [k x vocab_size]
};
ForwardBackward forward_and_grad(const ModelWeights& w, const TokenSeq& x, int32_t t);

// Batched final-position outputs. Either output pointer may be null.
void forward_batch(const ModelWeights& w, const TokenBatch& batch,
                   Eigen::MatrixXd* logits_out,       // [n_seqs x vocab_size]
                   Eigen::MatrixXd* pre_unembed_out);  // [n_seqs x d_model]

// Argmax with ties broken toward the lowest token id. Every module that tests
// membership of the target event uses this rule.
int32_t argmax_token(const Eigen::VectorXd& logits);

// All tensors zero (layer norm scales included).
ModelWeights zero_weights(const ModelSpec& spec);

// Seeded Gaussian initialization: projection and unembed entries are scaled
// by 1/sqrt(d_model), embeddings unit-scale, layer norms identity.
ModelWeights random_weights(const ModelSpec& spec, uint64_t seed);

// Model file = JSON manifest (spec + tensor directory) next to a flat
// little-endian f32 blob. Loading upcasts to f64.
void save_model(const ModelWeights& w, const std::string& manifest_path);
ModelWeights load_model(const std::string& manifest_path);

}  // namespace lowprob
