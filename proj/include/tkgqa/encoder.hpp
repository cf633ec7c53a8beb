#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "tkgqa/autodiff.hpp"
#include "tkgqa/embedding.hpp"
#include "tkgqa/errors.hpp"
#include "tkgqa/optim.hpp"
#include "tkgqa/rng.hpp"

namespace tkgqa {

// Whitespace tokenizer with a closed vocabulary. Id 0 is reserved for
// out-of-vocabulary tokens; everything else is assigned in corpus order.
class Tokenizer {
public:
    static constexpr std::size_t kOov = 0;

    Tokenizer() { vocab_.push_back("<oov>"); }

    static std::vector<std::string> split(const std::string& text) {
        std::vector<std::string> out;
        std::istringstream in(text);
        std::string tok;
        while (in >> tok) out.push_back(tok);
        return out;
    }

    void fit(const std::string& text) {
        for (const std::string& tok : split(text))
            if (!ids_.count(tok)) {
                ids_.emplace(tok, vocab_.size());
                vocab_.push_back(tok);
            }
    }

    std::vector<std::size_t> encode(const std::string& text) const {
        std::vector<std::size_t> out;
        for (const std::string& tok : split(text)) {
            auto it = ids_.find(tok);
            out.push_back(it == ids_.end() ? kOov : it->second);
        }
        return out;
    }

    std::size_t vocab_size() const { return vocab_.size(); }
    const std::vector<std::string>& vocab() const { return vocab_; }

    json to_json() const { return json(vocab_); }

    static Tokenizer from_json(const json& j) {
        Tokenizer t;
        std::vector<std::string> words = j.get<std::vector<std::string>>();
        if (words.empty() || words[0] != "<oov>")
            throw DataError("tokenizer vocabulary must start with <oov>");
        t.vocab_.clear();
        t.ids_.clear();
        for (const std::string& w : words) {
            t.ids_.emplace(w, t.vocab_.size());
            t.vocab_.push_back(w);
        }
        return t;
    }

private:
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, std::size_t> ids_;
};

// Pre-norm-free residual self-attention stack. With all weights zero each
// layer is an exact identity, which the fusion tests rely on.
class SelfAttentionStack {
public:
    SelfAttentionStack() = default;

    SelfAttentionStack(ParameterStore& ps, const std::string& prefix, std::size_t layers,
                       std::size_t d_model, Rng& rng, double init_std)
        : d_(d_model) {
        for (std::size_t l = 0; l < layers; ++l) {
            std::string base = prefix + ".layer" + std::to_string(l);
            Layer layer;
            layer.wq = ps.add_normal(base + ".wq", {d_, d_}, rng, init_std);
            layer.wk = ps.add_normal(base + ".wk", {d_, d_}, rng, init_std);
            layer.wv = ps.add_normal(base + ".wv", {d_, d_}, rng, init_std);
            layer.w1 = ps.add_normal(base + ".ffn_w1", {d_, 2 * d_}, rng, init_std);
            layer.b1 = ps.add_zeros(base + ".ffn_b1", {2 * d_});
            layer.w2 = ps.add_normal(base + ".ffn_w2", {2 * d_, d_}, rng, init_std);
            layer.b2 = ps.add_zeros(base + ".ffn_b2", {d_});
            layers_.push_back(std::move(layer));
        }
    }

    // X: (n x d). Single-head scaled dot-product attention with residual
    // connections around both the attention and the feed-forward block.
    NodeRef forward(NodeRef x) const {
        double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_));
        for (const Layer& l : layers_) {
            NodeRef q = matmul(x, l.wq);
            NodeRef k = matmul(x, l.wk);
            NodeRef v = matmul(x, l.wv);
            NodeRef scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
            NodeRef attn = matmul(row_softmax(scores), v);
            x = add(x, attn);
            NodeRef hidden = relu(add_row(matmul(x, l.w1), l.b1));
            x = add(x, add_row(matmul(hidden, l.w2), l.b2));
        }
        return x;
    }

    std::size_t width() const { return d_; }

    // Copy whose weights are constants snapshotting current values. Forward
    // passes through it build no backprop closures, so scoring large pools
    // stays cheap; gradients are deliberately cut.
    SelfAttentionStack frozen() const {
        SelfAttentionStack out;
        out.d_ = d_;
        for (const Layer& l : layers_) {
            Layer f;
            f.wq = constant(l.wq->value);
            f.wk = constant(l.wk->value);
            f.wv = constant(l.wv->value);
            f.w1 = constant(l.w1->value);
            f.b1 = constant(l.b1->value);
            f.w2 = constant(l.w2->value);
            f.b2 = constant(l.b2->value);
            out.layers_.push_back(std::move(f));
        }
        return out;
    }

private:
    struct Layer {
        NodeRef wq, wk, wv, w1, b1, w2, b2;
    };
    std::size_t d_ = 0;
    std::vector<Layer> layers_;
};

struct EncodedSequence {
    NodeRef summary;       // d_model; plays the [CLS] role
    NodeRef token_states;  // n x d_model, one row per input token
};

// Trainable sentence encoder: token embedding + fixed sinusoidal positions
// + a learned summary slot + self-attention layers. Stands in for the
// pretrained sentence encoder at desk scale with the same interface.
class TextEncoder {
public:
    TextEncoder() = default;

    TextEncoder(ParameterStore& ps, const std::string& prefix, std::size_t vocab_size,
                std::size_t d_model, std::size_t layers, Rng& rng, double init_std = 0.08)
        : d_(d_model) {
        embedding_ = ps.add_normal(prefix + ".token_embedding", {vocab_size, d_model}, rng,
                                   init_std);
        summary_slot_ = ps.add_normal(prefix + ".summary_slot", {d_model}, rng, init_std);
        stack_ = SelfAttentionStack(ps, prefix, layers, d_model, rng, init_std);
    }

    std::size_t width() const { return d_; }
    NodeRef embedding_table() const { return embedding_; }

    // Snapshot with constant weights; encodes through it carry no gradient.
    TextEncoder frozen() const {
        TextEncoder out;
        out.d_ = d_;
        out.embedding_ = constant(embedding_->value);
        out.summary_slot_ = constant(summary_slot_->value);
        out.stack_ = stack_.frozen();
        return out;
    }

    EncodedSequence encode(const std::vector<std::size_t>& tokens) const {
        if (tokens.empty()) throw UsageError("encode: empty token list");
        for (std::size_t t : tokens)
            if (t >= embedding_->value.shape[0])
                throw UsageError("encode: token id " + std::to_string(t) + " out of range");
        std::size_t n = tokens.size();
        // Summary slot sits at position 0; tokens occupy positions 1..n.
        NodeRef emb = rows(embedding_, tokens);
        NodeRef seq = concat({reshape(summary_slot_, {1, d_}), emb}, 0);
        Tensor pos({n + 1, d_});
        for (std::size_t i = 0; i <= n; ++i) {
            Tensor p = position_encoding(i, d_);
            std::copy(p.data.begin(), p.data.end(), pos.data.begin() + i * d_);
        }
        NodeRef out = stack_.forward(add(seq, constant(pos)));
        std::vector<std::size_t> token_rows(n);
        for (std::size_t i = 0; i < n; ++i) token_rows[i] = i + 1;
        return EncodedSequence{row(out, 0), rows(out, token_rows)};
    }

private:
    std::size_t d_ = 0;
    NodeRef embedding_;
    NodeRef summary_slot_;
    SelfAttentionStack stack_;
};

// Cosine of the two summary vectors' current values; selection is discrete,
// so retrieval scores deliberately carry no gradient.
inline double cosine_value(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("cosine: shapes " + a.shape_str() + " vs " + b.shape_str());
    double uv = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        uv += a.data[i] * b.data[i];
        uu += a.data[i] * a.data[i];
        vv += b.data[i] * b.data[i];
    }
    if (uu == 0.0 || vv == 0.0) return 0.0;
    return uv / (std::sqrt(uu) * std::sqrt(vv));
}

}  // namespace tkgqa
