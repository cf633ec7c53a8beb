#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "tkgqa/autodiff.hpp"
#include "tkgqa/encoder.hpp"
#include "tkgqa/errors.hpp"
#include "tkgqa/optim.hpp"
#include "tkgqa/rng.hpp"

namespace tkgqa {

// One retrieved fact: pool position, fact id in the store, cosine score.
struct RetrievedSpo {
    std::size_t pool_index = 0;
    std::size_t fact = 0;
    double score = 0.0;
};

// Cosine top-k over candidate summaries. Ties break toward the smaller fact
// id; a pool smaller than k is returned whole; an empty pool yields an empty
// result (the caller decides whether to warn).
inline std::vector<RetrievedSpo> retrieve_spo(const Tensor& question_summary,
                                              const std::vector<Tensor>& candidate_summaries,
                                              const std::vector<std::size_t>& fact_ids,
                                              std::size_t k) {
    if (candidate_summaries.size() != fact_ids.size())
        throw UsageError("retrieve_spo: summaries and fact ids disagree in length");
    std::vector<RetrievedSpo> scored;
    scored.reserve(fact_ids.size());
    for (std::size_t i = 0; i < fact_ids.size(); ++i)
        scored.push_back({i, fact_ids[i], cosine_value(question_summary, candidate_summaries[i])});
    std::stable_sort(scored.begin(), scored.end(), [](const RetrievedSpo& a, const RetrievedSpo& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.fact < b.fact;
    });
    if (scored.size() > k) scored.resize(k);
    return scored;
}

enum class AlignView { concat, dot, minus };

// Question-side calibration outputs. Attention matrices are kept for
// inspection and for the explain report.
struct CalibrationResult {
    NodeRef q_sem;     // n x d, gated token representations
    NodeRef q_hat;     // n x d, fused question tokens before the gate
    NodeRef s_hat;     // m x d, fused candidate summaries
    NodeRef gate;      // n x d, per-token gate values
    NodeRef attn[3];   // question-side attention per view, each n x m
};

// Aligns question tokens with retrieved SPO summaries through concat / dot /
// minus attention, fuses the three views on both sides, and gates the fused
// candidate signal into the question tokens.
class CalibrationModule {
public:
    CalibrationModule() = default;

    CalibrationModule(ParameterStore& ps, const std::string& prefix, std::size_t d_model,
                      Rng& rng, double init_std = 0.08)
        : d_(d_model) {
        auto make_view = [&](const std::string& name, std::size_t in_width) {
            ViewParams vp;
            vp.w = ps.add_normal(prefix + "." + name + ".w", {in_width, d_}, rng, init_std);
            vp.v = ps.add_normal(prefix + "." + name + ".v", {d_}, rng, init_std);
            return vp;
        };
        q_views_[0] = make_view("q_concat", 2 * d_);
        q_views_[1] = make_view("q_dot", d_);
        q_views_[2] = make_view("q_minus", d_);
        s_views_[0] = make_view("s_concat", 2 * d_);
        s_views_[1] = make_view("s_dot", d_);
        s_views_[2] = make_view("s_minus", d_);
        fuse_q_ = ps.add_normal(prefix + ".fuse_q", {6 * d_, d_}, rng, init_std);
        fuse_s_ = ps.add_normal(prefix + ".fuse_s", {6 * d_, d_}, rng, init_std);
        gate_ws_ = ps.add_normal(prefix + ".gate_ws", {d_, d_}, rng, init_std);
        gate_bs_ = ps.add_zeros(prefix + ".gate_bs", {d_});
        gate_wg_ = ps.add_normal(prefix + ".gate_wg", {d_, d_}, rng, init_std);
    }

    std::size_t width() const { return d_; }

    // queries: n x d, keys: m x d. For each query row k and key row j,
    // h_j = v' tanh(W combine(q_k, s_j)); alpha = softmax_j; out row k is the
    // alpha-weighted sum of key rows. Returns the aligned matrix and alpha.
    struct Alignment {
        NodeRef aligned;  // n x d
        NodeRef weights;  // n x m
    };

    Alignment align(NodeRef queries, NodeRef keys, AlignView view, bool mirrored = false) const {
        TKGQA_REQUIRE(queries->value.rank() == 2 && keys->value.rank() == 2,
                      "align: expected rank-2 inputs");
        std::size_t n = queries->value.shape[0];
        std::size_t m = keys->value.shape[0];
        const ViewParams& vp =
            (mirrored ? s_views_ : q_views_)[static_cast<std::size_t>(view)];
        std::vector<NodeRef> logit_cols;
        logit_cols.reserve(m);
        for (std::size_t j = 0; j < m; ++j) {
            NodeRef key_rep = rows(keys, std::vector<std::size_t>(n, j));
            NodeRef combined;
            switch (view) {
                case AlignView::concat: combined = concat({queries, key_rep}, 1); break;
                case AlignView::dot: combined = mul(queries, key_rep); break;
                case AlignView::minus: combined = sub(queries, key_rep); break;
            }
            logit_cols.push_back(matmul(tanh(matmul(combined, vp.w)), vp.v));
        }
        NodeRef weights = row_softmax(transpose(stack_rows(logit_cols)));
        return Alignment{matmul(weights, keys), weights};
    }

    // Per view: [queries || aligned] (n x 2d); three views side by side
    // (n x 6d) projected back to d. No bias, matching the zero-map example.
    NodeRef fuse(NodeRef queries, NodeRef aligned_cat, NodeRef aligned_dot, NodeRef aligned_min,
                 bool mirrored = false) const {
        NodeRef wide = concat({concat({queries, aligned_cat}, 1), concat({queries, aligned_dot}, 1),
                               concat({queries, aligned_min}, 1)},
                              1);
        return matmul(wide, mirrored ? fuse_s_ : fuse_q_);
    }

    // s_tilde = tanh(W_s mean(S_hat) + b); gate g = sigmoid((q_hat ⊙ s_tilde) W_g);
    // q_sem = g ⊙ q_hat + (1 − g) ⊙ s_tilde.
    struct Gated {
        NodeRef q_sem;
        NodeRef gate;
    };

    Gated adaptive_fusion(NodeRef q_hat, NodeRef s_hat) const {
        std::size_t n = q_hat->value.shape[0];
        NodeRef s_tilde = tanh(add(matmul(mean_axis(s_hat, 0), gate_ws_), gate_bs_));
        NodeRef s_rep = rows(reshape(s_tilde, {1, d_}), std::vector<std::size_t>(n, 0));
        NodeRef gate = sigmoid(matmul(mul(q_hat, s_rep), gate_wg_));
        NodeRef inv_gate = add_const(scale(gate, -1.0), 1.0);
        return Gated{add(mul(gate, q_hat), mul(inv_gate, s_rep)), gate};
    }

    // Full pipeline: three question-side views, the mirrored candidate-side
    // views, fusion on both sides, then the adaptive gate.
    CalibrationResult calibrate(NodeRef question_tokens, NodeRef candidate_summaries) const {
        TKGQA_REQUIRE(candidate_summaries->value.shape[0] >= 1,
                      "calibrate: need at least one candidate");
        CalibrationResult out;
        Alignment qa[3], sa[3];
        for (std::size_t v = 0; v < 3; ++v) {
            qa[v] = align(question_tokens, candidate_summaries, static_cast<AlignView>(v));
            sa[v] = align(candidate_summaries, question_tokens, static_cast<AlignView>(v),
                          /*mirrored=*/true);
            out.attn[v] = qa[v].weights;
        }
        out.q_hat = fuse(question_tokens, qa[0].aligned, qa[1].aligned, qa[2].aligned);
        out.s_hat = fuse(candidate_summaries, sa[0].aligned, sa[1].aligned, sa[2].aligned,
                         /*mirrored=*/true);
        Gated gated = adaptive_fusion(out.q_hat, out.s_hat);
        out.q_sem = gated.q_sem;
        out.gate = gated.gate;
        return out;
    }

private:
    struct ViewParams {
        NodeRef w;  // in_width x d
        NodeRef v;  // d
    };
    std::size_t d_ = 0;
    ViewParams q_views_[3];
    ViewParams s_views_[3];
    NodeRef fuse_q_, fuse_s_;
    NodeRef gate_ws_, gate_bs_, gate_wg_;
};

}  // namespace tkgqa
