#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "tkgqa/autodiff.hpp"
#include "tkgqa/embedding.hpp"
#include "tkgqa/errors.hpp"
#include "tkgqa/kg.hpp"
#include "tkgqa/optim.hpp"
#include "tkgqa/rng.hpp"

namespace tkgqa {

// Joint candidate distribution. Candidates are the subgraph's entities in
// ascending id order followed by its timestamps in ascending id order; the
// logit and probability vectors align with that concatenation.
struct AnswerDistribution {
    std::vector<std::size_t> entity_candidates;
    std::vector<std::size_t> timestamp_candidates;
    NodeRef logits;
    NodeRef probabilities;

    std::size_t size() const { return entity_candidates.size() + timestamp_candidates.size(); }

    // Position of an answer id in the concatenated candidate list, -1 when
    // the id is not a candidate. Both candidate lists are sorted.
    std::ptrdiff_t candidate_index(AnswerType type, std::size_t id) const {
        if (type == AnswerType::entity) {
            auto it = std::lower_bound(entity_candidates.begin(), entity_candidates.end(), id);
            if (it == entity_candidates.end() || *it != id) return -1;
            return it - entity_candidates.begin();
        }
        auto it = std::lower_bound(timestamp_candidates.begin(), timestamp_candidates.end(), id);
        if (it == timestamp_candidates.end() || *it != id) return -1;
        return static_cast<std::ptrdiff_t>(entity_candidates.size()) +
               (it - timestamp_candidates.begin());
    }
};

// Projects the fused question vector into entity and timestamp query slots
// and scores subgraph candidates with the complex trilinear form. The query
// plugs into the relation slot: entity scores are Re<e_s, Q_ent * e_t,
// conj(e_cand)> and timestamp scores Re<e_s, Q_tim * e_cand, conj(e_o)>.
// With the split representation both reduce to real dot products against the
// candidate table, so each block is one matrix-vector product.
class AnswerHead {
public:
    AnswerHead(ParameterStore& ps, const std::string& prefix, std::size_t d_model,
               std::size_t kg_width, Rng& rng, double init_std = 0.08)
        : d_(d_model), width_(kg_width) {
        if (kg_width == 0 || kg_width % 2 != 0)
            throw UsageError("answer head: table width must be a positive even number");
        auto mlp = [&](const std::string& name, Mlp& m) {
            m.w1 = ps.add_normal(prefix + "." + name + ".w1", {d_, 2 * d_}, rng, init_std);
            m.b1 = ps.add_zeros(prefix + "." + name + ".b1", {2 * d_});
            m.w2 = ps.add_normal(prefix + "." + name + ".w2", {2 * d_, width_}, rng, init_std);
            m.b2 = ps.add_zeros(prefix + "." + name + ".b2", {width_});
        };
        mlp("ent", ent_);
        mlp("tim", tim_);
        placeholder_entity_ =
            ps.add_normal(prefix + ".placeholder_entity", {width_}, rng, init_std);
        placeholder_timestamp_ =
            ps.add_normal(prefix + ".placeholder_timestamp", {width_}, rng, init_std);
    }

    std::size_t d_model() const { return d_; }
    std::size_t width() const { return width_; }

    // Two independent 2-layer perceptrons map Q_fin to table-width vectors.
    std::pair<NodeRef, NodeRef> project(const NodeRef& q_fin) const {
        if (q_fin->value.rank() != 1 || q_fin->value.shape[0] != d_)
            throw UsageError("project: expected a vector of length " + std::to_string(d_));
        auto run = [&](const Mlp& m) {
            NodeRef h = relu(add(matmul(q_fin, m.w1), m.b1));
            return add(matmul(h, m.w2), m.b2);
        };
        return {run(ent_), run(tim_)};
    }

    // Scores every subgraph candidate and softmaxes the concatenated logits.
    // Annotation slots: first annotated entity as subject, second as object,
    // first annotated timestamp; learned placeholders fill missing slots.
    AnswerDistribution score_candidates(const QuestionInstance& q, const QuerySubgraph& sg,
                                        const KgEmbeddings& emb, const NodeRef& q_ent,
                                        const NodeRef& q_tim) const {
        if (sg.candidate_entities.empty() && sg.candidate_timestamps.empty())
            throw DataError("score_candidates: question subgraph has no candidates");
        std::size_t D = width_ / 2;
        NodeRef e_s =
            q.entities.empty() ? placeholder_entity_ : emb.entity_row(q.entities[0]);
        NodeRef e_o =
            q.entities.size() < 2 ? placeholder_entity_ : emb.entity_row(q.entities[1]);
        NodeRef e_t = q.timestamps.empty() ? placeholder_timestamp_
                                           : emb.timestamp_row(q.timestamps[0]);

        std::vector<NodeRef> blocks;
        if (!sg.candidate_entities.empty()) {
            NodeRef u = complex_mul(complex_mul(e_s, q_ent, D), e_t, D);
            blocks.push_back(matmul(rows(emb.entity_table(), sg.candidate_entities), u));
        }
        if (!sg.candidate_timestamps.empty()) {
            NodeRef u = complex_mul(e_s, q_tim, D);
            std::size_t k = sg.candidate_timestamps.size();
            NodeRef u_rep = rows(reshape(u, {1, width_}), std::vector<std::size_t>(k, 0));
            NodeRef cand = rows(emb.timestamp_table(), sg.candidate_timestamps);
            blocks.push_back(matmul(complex_mul(cand, u_rep, D), e_o));
        }
        AnswerDistribution dist;
        dist.entity_candidates = sg.candidate_entities;
        dist.timestamp_candidates = sg.candidate_timestamps;
        dist.logits = blocks.size() == 1 ? blocks[0] : concat(blocks, 0);
        std::size_t n = dist.size();
        dist.probabilities = reshape(row_softmax(reshape(dist.logits, {1, n})), {n});
        return dist;
    }

private:
    struct Mlp {
        NodeRef w1, b1, w2, b2;
    };

    std::size_t d_;
    std::size_t width_;
    Mlp ent_, tim_;
    NodeRef placeholder_entity_, placeholder_timestamp_;
};

// True when at least one gold answer appears among the candidates; questions
// failing this are excluded from training batches and counted by the caller.
inline bool gold_in_candidates(const AnswerDistribution& dist, const QuestionInstance& q) {
    for (std::size_t a : q.answers)
        if (dist.candidate_index(q.answer_type, a) >= 0) return true;
    return false;
}

// Cross-entropy against a target that spreads unit mass uniformly over the
// gold answers present in the candidate list. Computed from the logits via
// log-softmax for stability.
inline NodeRef qa_loss(const AnswerDistribution& dist, const QuestionInstance& q) {
    std::vector<std::size_t> gold_pos;
    for (std::size_t a : q.answers) {
        std::ptrdiff_t idx = dist.candidate_index(q.answer_type, a);
        if (idx >= 0) gold_pos.push_back(static_cast<std::size_t>(idx));
    }
    std::sort(gold_pos.begin(), gold_pos.end());
    gold_pos.erase(std::unique(gold_pos.begin(), gold_pos.end()), gold_pos.end());
    if (gold_pos.empty())
        throw UsageError("qa_loss: no gold answer among candidates; skip this instance");
    std::size_t n = dist.size();
    Tensor target({1, n});
    for (std::size_t p : gold_pos) target(0, p) = 1.0 / static_cast<double>(gold_pos.size());
    NodeRef lp = log_row_softmax(reshape(dist.logits, {1, n}));
    return scale(sum_all(mul(constant(target), lp)), -1.0);
}

}  // namespace tkgqa
