#include "lowprob/model.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "lowprob/rng.hpp"

namespace lowprob {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kSqrt2 = 1.4142135623730950488;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

struct LnRowCache {
    Eigen::VectorXd xhat;
    double r = 0.0;  // 1 / sqrt(var + eps)
};

Eigen::VectorXd ln_row(const Eigen::VectorXd& x, const Eigen::VectorXd& gamma,
                       const Eigen::VectorXd& beta, LnRowCache* cache) {
    const auto d = x.size();
    const double m = x.mean();
    Eigen::VectorXd c = x.array() - m;
    const double var = c.squaredNorm() / static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLnEps);
    Eigen::VectorXd xhat = c * r;
    Eigen::VectorXd y = xhat.cwiseProduct(gamma) + beta;
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->r = r;
        return y;
    }
    return y;
}

Eigen::VectorXd ln_row_backward(const Eigen::VectorXd& dy, const LnRowCache& c,
                                const Eigen::VectorXd& gamma) {
    Eigen::VectorXd dxhat = dy.cwiseProduct(gamma);
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(c.xhat).mean();
    return c.r * (dxhat.array() - m1 - m2 * c.xhat.array()).matrix();
}

void ln_rows_inplace(Eigen::MatrixXd& out, const Eigen::MatrixXd& x, const Eigen::VectorXd& gamma,
                     const Eigen::VectorXd& beta) {
    const auto d = x.cols();
    out.resize(x.rows(), d);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double m = x.row(i).mean();
        Eigen::RowVectorXd c = x.row(i).array() - m;
        const double var = c.squaredNorm() / static_cast<double>(d);
        const double r = 1.0 / std::sqrt(var + kLnEps);
        out.row(i) = (c * r).cwiseProduct(gamma.transpose()) + beta.transpose();
    }
}

struct LayerCache {
    Eigen::MatrixXd h_in;
    std::vector<LnRowCache> ln1;
    Eigen::MatrixXd q, k, v;
    std::vector<Eigen::MatrixXd> probs;  // per-head [k x k], strictly lower + diagonal
    Eigen::MatrixXd att_cat;
    Eigen::MatrixXd h_mid;
    std::vector<LnRowCache> ln2;
    Eigen::MatrixXd z;  // pre-GELU
    Eigen::MatrixXd g;  // gelu(z)
};

struct ForwardCache {
    Eigen::MatrixXd x0;
    std::vector<LayerCache> layers;
    Eigen::MatrixXd h_final;
    LnRowCache lnf;  // final position only
    Eigen::VectorXd v_pre;
};

void check_tokens(const ModelWeights& w, const TokenSeq& x) {
    if (x.empty()) throw input_error("empty token sequence");
    if (static_cast<int>(x.size()) > w.spec.max_seq_len)
        throw input_error("sequence length exceeds max_seq_len");
    for (int32_t id : x) {
        if (id < 0 || id >= w.spec.vocab_size) throw input_error("token id out of range");
    }
}

Eigen::MatrixXd embed(const ModelWeights& w, const TokenSeq& x) {
    const int k = static_cast<int>(x.size());
    Eigen::MatrixXd e(k, w.spec.d_model);
    for (int i = 0; i < k; ++i) {
        e.row(i) = w.token_embedding.row(x[i]) + w.positional_embedding.row(i);
    }
    return e;
}

void attention_heads(const ModelSpec& spec, const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                     const Eigen::MatrixXd& v, Eigen::MatrixXd& att_cat,
                     std::vector<Eigen::MatrixXd>* probs_out) {
    const int kk = static_cast<int>(q.rows());
    const int dh = spec.d_model / spec.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    att_cat.resize(kk, spec.d_model);
    if (probs_out) probs_out->assign(spec.n_heads, Eigen::MatrixXd());
    for (int h = 0; h < spec.n_heads; ++h) {
        auto qh = q.middleCols(h * dh, dh);
        auto kh = k.middleCols(h * dh, dh);
        auto vh = v.middleCols(h * dh, dh);
        Eigen::MatrixXd scores = qh * kh.transpose() * scale;
        Eigen::MatrixXd p = Eigen::MatrixXd::Zero(kk, kk);
        for (int i = 0; i < kk; ++i) {
            // causal: position i attends to j <= i
            double m = scores.row(i).head(i + 1).maxCoeff();
            double sum = 0.0;
            for (int j = 0; j <= i; ++j) {
                double e = std::exp(scores(i, j) - m);
                p(i, j) = e;
                sum += e;
            }
            p.row(i).head(i + 1) /= sum;
        }
        att_cat.middleCols(h * dh, dh) = p * vh;
        if (probs_out) (*probs_out)[h] = std::move(p);
    }
}

// Runs the full stack from an embedding-input matrix. Fills `cache` when
// non-null (needed for the backward pass).
Eigen::VectorXd run_forward(const ModelWeights& w, const Eigen::MatrixXd& emb,
                            ForwardCache* cache) {
    const ModelSpec& spec = w.spec;
    const int k = static_cast<int>(emb.rows());
    Eigen::MatrixXd h = emb;
    if (cache) {
        cache->x0 = emb;
        cache->layers.resize(spec.n_layers);
    }
    for (int l = 0; l < spec.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        LayerCache* lc = cache ? &cache->layers[l] : nullptr;
        if (lc) {
            lc->h_in = h;
            lc->ln1.resize(k);
        }
        Eigen::MatrixXd n1(k, spec.d_model);
        for (int i = 0; i < k; ++i) {
            n1.row(i) = ln_row(h.row(i), lw.ln1_w, lw.ln1_b, lc ? &lc->ln1[i] : nullptr);
        }
        Eigen::MatrixXd q = (n1 * lw.w_q).rowwise() + lw.b_q.transpose();
        Eigen::MatrixXd km = (n1 * lw.w_k).rowwise() + lw.b_k.transpose();
        Eigen::MatrixXd v = (n1 * lw.w_v).rowwise() + lw.b_v.transpose();
        Eigen::MatrixXd att_cat;
        attention_heads(spec, q, km, v, att_cat, lc ? &lc->probs : nullptr);
        Eigen::MatrixXd h_mid = h + ((att_cat * lw.w_o).rowwise() + lw.b_o.transpose());
        if (lc) {
            lc->q = std::move(q);
            lc->k = std::move(km);
            lc->v = std::move(v);
            lc->att_cat = att_cat;
            lc->h_mid = h_mid;
            lc->ln2.resize(k);
        }
        Eigen::MatrixXd n2(k, spec.d_model);
        for (int i = 0; i < k; ++i) {
            n2.row(i) = ln_row(h_mid.row(i), lw.ln2_w, lw.ln2_b, lc ? &lc->ln2[i] : nullptr);
        }
        Eigen::MatrixXd z = (n2 * lw.w_in).rowwise() + lw.b_in.transpose();
        Eigen::MatrixXd g = z.unaryExpr([](double t) { return gelu(t); });
        h = h_mid + ((g * lw.w_out).rowwise() + lw.b_out.transpose());
        if (lc) {
            lc->z = std::move(z);
            lc->g = std::move(g);
        }
    }
    Eigen::VectorXd v_pre =
        ln_row(h.row(k - 1), w.ln_f_w, w.ln_f_b, cache ? &cache->lnf : nullptr);
    if (cache) {
        cache->h_final = std::move(h);
        cache->v_pre = v_pre;
    }
    if (!v_pre.allFinite()) throw numeric_error("non-finite pre-unembed activation");
    return v_pre;
}

// Gradient of the target logit with respect to the embedding-input matrix.
Eigen::MatrixXd run_backward(const ModelWeights& w, const ForwardCache& cache, int32_t t) {
    const ModelSpec& spec = w.spec;
    const int k = static_cast<int>(cache.x0.rows());
    const int dh = spec.d_model / spec.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Eigen::MatrixXd dh_mat = Eigen::MatrixXd::Zero(k, spec.d_model);
    Eigen::VectorXd dv = w.unembed.col(t);
    dh_mat.row(k - 1) = ln_row_backward(dv, cache.lnf, w.ln_f_w).transpose();

    for (int l = spec.n_layers - 1; l >= 0; --l) {
        const LayerWeights& lw = w.layers[l];
        const LayerCache& lc = cache.layers[l];

        // MLP sublayer: h_out = h_mid + gelu(LN2(h_mid) W_in + b) W_out + b
        Eigen::MatrixXd dg = dh_mat * lw.w_out.transpose();
        Eigen::MatrixXd dz =
            dg.cwiseProduct(lc.z.unaryExpr([](double t2) { return gelu_grad(t2); }));
        Eigen::MatrixXd dn2 = dz * lw.w_in.transpose();
        Eigen::MatrixXd dh_mid = dh_mat;
        for (int i = 0; i < k; ++i) {
            dh_mid.row(i) += ln_row_backward(dn2.row(i), lc.ln2[i], lw.ln2_w).transpose();
        }

        // Attention sublayer: h_mid = h_in + att_cat W_o + b
        Eigen::MatrixXd datt_cat = dh_mid * lw.w_o.transpose();
        Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(k, spec.d_model);
        Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(k, spec.d_model);
        Eigen::MatrixXd dvm = Eigen::MatrixXd::Zero(k, spec.d_model);
        for (int h = 0; h < spec.n_heads; ++h) {
            const Eigen::MatrixXd& p = lc.probs[h];
            auto qh = lc.q.middleCols(h * dh, dh);
            auto kh = lc.k.middleCols(h * dh, dh);
            auto vh = lc.v.middleCols(h * dh, dh);
            auto doh = datt_cat.middleCols(h * dh, dh);
            Eigen::MatrixXd dp = doh * vh.transpose();
            dvm.middleCols(h * dh, dh) = p.transpose() * doh;
            Eigen::MatrixXd ds(k, k);
            for (int i = 0; i < k; ++i) {
                const double dot = dp.row(i).dot(p.row(i));
                ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
            }
            dq.middleCols(h * dh, dh) = ds * kh * scale;
            dk.middleCols(h * dh, dh) = ds.transpose() * qh * scale;
        }
        Eigen::MatrixXd dn1 =
            dq * lw.w_q.transpose() + dk * lw.w_k.transpose() + dvm * lw.w_v.transpose();
        dh_mat = dh_mid;
        for (int i = 0; i < k; ++i) {
            dh_mat.row(i) += ln_row_backward(dn1.row(i), lc.ln1[i], lw.ln1_w).transpose();
        }
    }
    return dh_mat;
}

}  // namespace

void ModelSpec::validate() const {
    if (n_layers < 0) throw input_error("n_layers must be >= 0");
    if (d_model < 1 || n_heads < 1 || d_mlp < 1) throw input_error("bad model dimensions");
    if (d_model % n_heads != 0) throw input_error("d_model must be divisible by n_heads");
    if (vocab_size < 2) throw input_error("vocab_size must be >= 2");
    if (max_seq_len < 1) throw input_error("max_seq_len must be >= 1");
    if (activation != "gelu_exact") throw input_error("unsupported activation: " + activation);
}

void ModelWeights::validate() const {
    spec.validate();
    auto check = [](const char* name, bool cond) {
        if (!cond) throw input_error(std::string("model tensor shape mismatch: ") + name);
    };
    check("token_embedding", token_embedding.rows() == spec.vocab_size &&
                                 token_embedding.cols() == spec.d_model);
    check("positional_embedding", positional_embedding.rows() == spec.max_seq_len &&
                                      positional_embedding.cols() == spec.d_model);
    check("layers", static_cast<int>(layers.size()) == spec.n_layers);
    for (const auto& l : layers) {
        check("ln1", l.ln1_w.size() == spec.d_model && l.ln1_b.size() == spec.d_model);
        check("attn", l.w_q.rows() == spec.d_model && l.w_q.cols() == spec.d_model &&
                          l.w_k.rows() == spec.d_model && l.w_v.rows() == spec.d_model &&
                          l.w_o.rows() == spec.d_model && l.b_q.size() == spec.d_model &&
                          l.b_k.size() == spec.d_model && l.b_v.size() == spec.d_model &&
                          l.b_o.size() == spec.d_model);
        check("ln2", l.ln2_w.size() == spec.d_model && l.ln2_b.size() == spec.d_model);
        check("mlp", l.w_in.rows() == spec.d_model && l.w_in.cols() == spec.d_mlp &&
                         l.b_in.size() == spec.d_mlp && l.w_out.rows() == spec.d_mlp &&
                         l.w_out.cols() == spec.d_model && l.b_out.size() == spec.d_model);
    }
    check("ln_f", ln_f_w.size() == spec.d_model && ln_f_b.size() == spec.d_model);
    check("unembed", unembed.rows() == spec.d_model && unembed.cols() == spec.vocab_size);

    auto finite = [](const Eigen::MatrixXd& m) { return m.allFinite(); };
    bool ok = finite(token_embedding) && finite(positional_embedding) && ln_f_w.allFinite() &&
              ln_f_b.allFinite() && finite(unembed);
    for (const auto& l : layers) {
        ok = ok && finite(l.w_q) && finite(l.w_k) && finite(l.w_v) && finite(l.w_o) &&
             finite(l.w_in) && finite(l.w_out) && l.ln1_w.allFinite() && l.ln1_b.allFinite() &&
             l.ln2_w.allFinite() && l.ln2_b.allFinite() && l.b_q.allFinite() &&
             l.b_k.allFinite() && l.b_v.allFinite() && l.b_o.allFinite() && l.b_in.allFinite() &&
             l.b_out.allFinite();
    }
    if (!ok) throw numeric_error("model weights contain non-finite entries");
}

double gelu(double z) { return z * 0.5 * std::erfc(-z / kSqrt2); }

double gelu_grad(double z) {
    const double phi = kInvSqrt2Pi * std::exp(-0.5 * z * z);
    return 0.5 * std::erfc(-z / kSqrt2) + z * phi;
}

Eigen::VectorXd pre_unembed(const ModelWeights& w, const TokenSeq& x) {
    check_tokens(w, x);
    return run_forward(w, embed(w, x), nullptr);
}

Eigen::VectorXd forward_logits(const ModelWeights& w, const TokenSeq& x) {
    Eigen::VectorXd v = pre_unembed(w, x);
    Eigen::VectorXd logits = w.unembed.transpose() * v;
    if (!logits.allFinite()) throw numeric_error("non-finite logits");
    return logits;
}

Eigen::VectorXd forward_logits_from_embedding(const ModelWeights& w, const Eigen::MatrixXd& emb) {
    if (emb.cols() != w.spec.d_model || emb.rows() < 1)
        throw input_error("bad embedding matrix shape");
    Eigen::VectorXd v = run_forward(w, emb, nullptr);
    Eigen::VectorXd logits = w.unembed.transpose() * v;
    if (!logits.allFinite()) throw numeric_error("non-finite logits");
    return logits;
}

Eigen::MatrixXd grad_target_logit(const ModelWeights& w, const TokenSeq& x, int32_t t) {
    return forward_and_grad(w, x, t).grad;
}

ForwardBackward forward_and_grad(const ModelWeights& w, const TokenSeq& x, int32_t t) {
    check_tokens(w, x);
    if (t < 0 || t >= w.spec.vocab_size) throw input_error("target token out of range");
    ForwardCache cache;
    Eigen::VectorXd v = run_forward(w, embed(w, x), &cache);
    ForwardBackward out;
    out.logits = w.unembed.transpose() * v;
    Eigen::MatrixXd d_emb = run_backward(w, cache, t);
    out.grad = d_emb * w.token_embedding.transpose();  // [k x vocab]
    if (!out.logits.allFinite() || !out.grad.allFinite())
        throw numeric_error("non-finite forward/backward result");
    return out;
}

void forward_batch(const ModelWeights& w, const TokenBatch& batch, Eigen::MatrixXd* logits_out,
                   Eigen::MatrixXd* pre_unembed_out) {
    const ModelSpec& spec = w.spec;
    const int n = batch.n_seqs;
    const int k = batch.k;
    if (n == 0) return;
    if (k < 1 || k > spec.max_seq_len) throw input_error("bad batch sequence length");
    for (int32_t id : batch.tokens) {
        if (id < 0 || id >= spec.vocab_size) throw input_error("token id out of range");
    }

    Eigen::MatrixXd h(static_cast<Eigen::Index>(n) * k, spec.d_model);
    for (int b = 0; b < n; ++b) {
        const int32_t* row = batch.row(b);
        for (int i = 0; i < k; ++i) {
            h.row(static_cast<Eigen::Index>(b) * k + i) =
                w.token_embedding.row(row[i]) + w.positional_embedding.row(i);
        }
    }

    Eigen::MatrixXd norm, att_cat(static_cast<Eigen::Index>(n) * k, spec.d_model);
    for (int l = 0; l < spec.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        ln_rows_inplace(norm, h, lw.ln1_w, lw.ln1_b);
        Eigen::MatrixXd q = (norm * lw.w_q).rowwise() + lw.b_q.transpose();
        Eigen::MatrixXd km = (norm * lw.w_k).rowwise() + lw.b_k.transpose();
        Eigen::MatrixXd v = (norm * lw.w_v).rowwise() + lw.b_v.transpose();
        for (int b = 0; b < n; ++b) {
            Eigen::MatrixXd cat;
            attention_heads(spec, q.middleRows(static_cast<Eigen::Index>(b) * k, k),
                            km.middleRows(static_cast<Eigen::Index>(b) * k, k),
                            v.middleRows(static_cast<Eigen::Index>(b) * k, k), cat, nullptr);
            att_cat.middleRows(static_cast<Eigen::Index>(b) * k, k) = cat;
        }
        h += (att_cat * lw.w_o).rowwise() + lw.b_o.transpose();
        ln_rows_inplace(norm, h, lw.ln2_w, lw.ln2_b);
        Eigen::MatrixXd z = (norm * lw.w_in).rowwise() + lw.b_in.transpose();
        z = z.unaryExpr([](double t) { return gelu(t); });
        h += (z * lw.w_out).rowwise() + lw.b_out.transpose();
    }

    Eigen::MatrixXd v_pre(n, spec.d_model);
    for (int b = 0; b < n; ++b) {
        v_pre.row(b) =
            ln_row(h.row(static_cast<Eigen::Index>(b) * k + k - 1), w.ln_f_w, w.ln_f_b, nullptr)
                .transpose();
    }
    if (!v_pre.allFinite()) throw numeric_error("non-finite batch activations");
    if (pre_unembed_out) *pre_unembed_out = v_pre;
    if (logits_out) {
        *logits_out = v_pre * w.unembed;
        if (!logits_out->allFinite()) throw numeric_error("non-finite batch logits");
    }
}

int32_t argmax_token(const Eigen::VectorXd& logits) {
    int32_t best = 0;
    double best_v = logits[0];
    for (int32_t i = 1; i < static_cast<int32_t>(logits.size()); ++i) {
        if (logits[i] > best_v) {
            best_v = logits[i];
            best = i;
        }
    }
    return best;
}

namespace {

struct TensorRef {
    std::string name;
    Eigen::MatrixXd* mat = nullptr;
    Eigen::VectorXd* vec = nullptr;
};

// Fixed serialization (and initialization) order for all tensors.
std::vector<TensorRef> tensor_list(ModelWeights& w) {
    std::vector<TensorRef> ts;
    ts.push_back({"token_embedding", &w.token_embedding, nullptr});
    ts.push_back({"positional_embedding", &w.positional_embedding, nullptr});
    for (size_t l = 0; l < w.layers.size(); ++l) {
        auto& L = w.layers[l];
        std::string p = "layers." + std::to_string(l) + ".";
        ts.push_back({p + "ln1.weight", nullptr, &L.ln1_w});
        ts.push_back({p + "ln1.bias", nullptr, &L.ln1_b});
        ts.push_back({p + "attn.w_q", &L.w_q, nullptr});
        ts.push_back({p + "attn.b_q", nullptr, &L.b_q});
        ts.push_back({p + "attn.w_k", &L.w_k, nullptr});
        ts.push_back({p + "attn.b_k", nullptr, &L.b_k});
        ts.push_back({p + "attn.w_v", &L.w_v, nullptr});
        ts.push_back({p + "attn.b_v", nullptr, &L.b_v});
        ts.push_back({p + "attn.w_o", &L.w_o, nullptr});
        ts.push_back({p + "attn.b_o", nullptr, &L.b_o});
        ts.push_back({p + "ln2.weight", nullptr, &L.ln2_w});
        ts.push_back({p + "ln2.bias", nullptr, &L.ln2_b});
        ts.push_back({p + "mlp.w_in", &L.w_in, nullptr});
        ts.push_back({p + "mlp.b_in", nullptr, &L.b_in});
        ts.push_back({p + "mlp.w_out", &L.w_out, nullptr});
        ts.push_back({p + "mlp.b_out", nullptr, &L.b_out});
    }
    ts.push_back({"ln_f.weight", nullptr, &w.ln_f_w});
    ts.push_back({"ln_f.bias", nullptr, &w.ln_f_b});
    ts.push_back({"unembed", &w.unembed, nullptr});
    return ts;
}

}  // namespace

ModelWeights zero_weights(const ModelSpec& spec) {
    spec.validate();
    ModelWeights w;
    w.spec = spec;
    w.token_embedding.setZero(spec.vocab_size, spec.d_model);
    w.positional_embedding.setZero(spec.max_seq_len, spec.d_model);
    w.layers.resize(spec.n_layers);
    for (auto& l : w.layers) {
        l.ln1_w.setZero(spec.d_model);
        l.ln1_b.setZero(spec.d_model);
        l.w_q.setZero(spec.d_model, spec.d_model);
        l.w_k.setZero(spec.d_model, spec.d_model);
        l.w_v.setZero(spec.d_model, spec.d_model);
        l.w_o.setZero(spec.d_model, spec.d_model);
        l.b_q.setZero(spec.d_model);
        l.b_k.setZero(spec.d_model);
        l.b_v.setZero(spec.d_model);
        l.b_o.setZero(spec.d_model);
        l.ln2_w.setZero(spec.d_model);
        l.ln2_b.setZero(spec.d_model);
        l.w_in.setZero(spec.d_model, spec.d_mlp);
        l.b_in.setZero(spec.d_mlp);
        l.w_out.setZero(spec.d_mlp, spec.d_model);
        l.b_out.setZero(spec.d_model);
    }
    w.ln_f_w.setZero(spec.d_model);
    w.ln_f_b.setZero(spec.d_model);
    w.unembed.setZero(spec.d_model, spec.vocab_size);
    return w;
}

namespace {

void fill_gaussian(Eigen::MatrixXd& m, double std_dev, Rng& rng) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = std_dev * rng.gauss();
}

}  // namespace

ModelWeights random_weights(const ModelSpec& spec, uint64_t seed) {
    ModelWeights w = zero_weights(spec);
    Rng rng(derive_seed(seed, stream::model_init));
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(spec.d_model));
    fill_gaussian(w.token_embedding, 1.0, rng);
    fill_gaussian(w.positional_embedding, 1.0, rng);
    for (auto& l : w.layers) {
        l.ln1_w.setOnes();
        fill_gaussian(l.w_q, proj_std, rng);
        fill_gaussian(l.w_k, proj_std, rng);
        fill_gaussian(l.w_v, proj_std, rng);
        fill_gaussian(l.w_o, proj_std, rng);
        l.ln2_w.setOnes();
        fill_gaussian(l.w_in, proj_std, rng);
        fill_gaussian(l.w_out, proj_std, rng);
    }
    w.ln_f_w.setOnes();
    fill_gaussian(w.unembed, proj_std, rng);
    return w;
}

namespace {

void put_f32_le(std::string& out, float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    out.push_back(static_cast<char>(u & 0xff));
    out.push_back(static_cast<char>((u >> 8) & 0xff));
    out.push_back(static_cast<char>((u >> 16) & 0xff));
    out.push_back(static_cast<char>((u >> 24) & 0xff));
}

float get_f32_le(const unsigned char* p) {
    uint32_t u = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                 (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

}  // namespace

void save_model(const ModelWeights& w, const std::string& manifest_path) {
    w.validate();
    namespace fs = std::filesystem;
    fs::path mpath(manifest_path);
    fs::path blob_path = mpath;
    blob_path.replace_extension(".bin");

    auto ts = tensor_list(const_cast<ModelWeights&>(w));
    std::string blob;
    nlohmann::json tensors = nlohmann::json::array();
    for (auto& t : ts) {
        nlohmann::json e;
        e["name"] = t.name;
        e["offset"] = blob.size();
        if (t.mat) {
            e["shape"] = {t.mat->rows(), t.mat->cols()};
            for (Eigen::Index r = 0; r < t.mat->rows(); ++r)
                for (Eigen::Index c = 0; c < t.mat->cols(); ++c)
                    put_f32_le(blob, static_cast<float>((*t.mat)(r, c)));
        } else {
            e["shape"] = {t.vec->size()};
            for (Eigen::Index i = 0; i < t.vec->size(); ++i)
                put_f32_le(blob, static_cast<float>((*t.vec)(i)));
        }
        tensors.push_back(e);
    }

    nlohmann::json manifest;
    manifest["schema_version"] = kSchemaVersion;
    manifest["dtype"] = "f32";
    manifest["byte_order"] = "little";
    manifest["blob"] = blob_path.filename().string();
    manifest["spec"] = {{"n_layers", w.spec.n_layers},     {"d_model", w.spec.d_model},
                        {"n_heads", w.spec.n_heads},       {"d_mlp", w.spec.d_mlp},
                        {"vocab_size", w.spec.vocab_size}, {"max_seq_len", w.spec.max_seq_len},
                        {"activation", w.spec.activation}};
    manifest["tensors"] = tensors;

    std::ofstream mb(blob_path, std::ios::binary);
    if (!mb) throw input_error("cannot write blob: " + blob_path.string());
    mb.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    mb.close();
    std::ofstream mf(mpath);
    if (!mf) throw input_error("cannot write manifest: " + mpath.string());
    mf << manifest.dump(2) << "\n";
}

ModelWeights load_model(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream mf(manifest_path);
    if (!mf) throw input_error("cannot open model manifest: " + manifest_path);
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw input_error(std::string("bad model manifest JSON: ") + e.what());
    }

    ModelSpec spec;
    try {
        const auto& s = manifest.at("spec");
        spec.n_layers = s.at("n_layers").get<int>();
        spec.d_model = s.at("d_model").get<int>();
        spec.n_heads = s.at("n_heads").get<int>();
        spec.d_mlp = s.at("d_mlp").get<int>();
        spec.vocab_size = s.at("vocab_size").get<int>();
        spec.max_seq_len = s.at("max_seq_len").get<int>();
        spec.activation = s.at("activation").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw input_error(std::string("bad model spec in manifest: ") + e.what());
    }
    ModelWeights w = zero_weights(spec);

    fs::path blob_path = fs::path(manifest_path).parent_path() / manifest.at("blob").get<std::string>();
    std::ifstream bf(blob_path, std::ios::binary);
    if (!bf) throw input_error("cannot open weight blob: " + blob_path.string());
    std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

    auto ts = tensor_list(w);
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != ts.size()) throw input_error("manifest tensor count mismatch");
    for (size_t i = 0; i < ts.size(); ++i) {
        const auto& e = tensors[i];
        if (e.at("name").get<std::string>() != ts[i].name)
            throw input_error("unexpected tensor order in manifest: " +
                              e.at("name").get<std::string>());
        size_t off = e.at("offset").get<size_t>();
        size_t count = ts[i].mat ? static_cast<size_t>(ts[i].mat->size())
                                 : static_cast<size_t>(ts[i].vec->size());
        if (off + count * 4 > blob.size()) throw input_error("weight blob too small");
        const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + off;
        if (ts[i].mat) {
            for (Eigen::Index r = 0; r < ts[i].mat->rows(); ++r)
                for (Eigen::Index c = 0; c < ts[i].mat->cols(); ++c, p += 4)
                    (*ts[i].mat)(r, c) = static_cast<double>(get_f32_le(p));
        } else {
            for (Eigen::Index j = 0; j < ts[i].vec->size(); ++j, p += 4)
                (*ts[i].vec)(j) = static_cast<double>(get_f32_le(p));
        }
    }
    w.validate();
    return w;
}

}  // namespace lowprob
