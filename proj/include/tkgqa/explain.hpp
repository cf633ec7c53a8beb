#pragma once

#include <string>
#include <vector>

#include "tkgqa/calibration.hpp"
#include "tkgqa/eval.hpp"
#include "tkgqa/gnn.hpp"
#include "tkgqa/kg.hpp"
#include "tkgqa/serialize.hpp"

namespace tkgqa {

inline json path_json(const KGStore& store, const PathResult& path) {
    json steps = json::array();
    for (const PathStep& s : path.steps)
        steps.push_back({{"src", store.entity_name(s.src)},
                         {"dst", store.entity_name(s.dst)},
                         {"relation", store.relation_name(s.relation)},
                         {"timestamp", store.timestamp_name(s.timestamp)},
                         {"attention", s.attention}});
    json nodes = json::array();
    for (std::size_t n : path.nodes) nodes.push_back(store.entity_name(n));
    return json{{"found", path.found},
                {"diagnostic", path.diagnostic},
                {"score", path.score},
                {"nodes", nodes},
                {"steps", steps}};
}

inline json attribution_json(const KGStore& store, const std::vector<RetrievedSpo>& retrieved,
                             const std::vector<double>& proportions) {
    json out = json::array();
    for (std::size_t i = 0; i < retrieved.size(); ++i)
        out.push_back({{"fact", retrieved[i].fact},
                       {"text", store.verbalize_fact(retrieved[i].fact)},
                       {"retrieval_score", retrieved[i].score},
                       {"proportion", i < proportions.size() ? proportions[i] : 0.0}});
    return out;
}

// Per-question prediction record: gold answers, the ten best-ranked
// candidates with probabilities, hit flags, and an optional reasoning path.
inline json prediction_record(const KGStore& store, const QuestionInstance& q,
                              const AnswerDistribution& dist, const json& path = json()) {
    auto candidate_name = [&](std::size_t pos) {
        if (pos < dist.entity_candidates.size())
            return store.entity_name(dist.entity_candidates[pos]);
        return store.timestamp_name(
            dist.timestamp_candidates[pos - dist.entity_candidates.size()]);
    };
    json golds = json::array();
    for (std::size_t a : q.answers)
        golds.push_back(q.answer_type == AnswerType::entity ? store.entity_name(a)
                                                            : store.timestamp_name(a));
    std::vector<std::size_t> order = ranked_positions(dist);
    json top = json::array();
    for (std::size_t r = 0; r < order.size() && r < 10; ++r)
        top.push_back({{"candidate", candidate_name(order[r])},
                       {"probability", dist.probabilities->value(order[r])}});
    std::size_t rank = best_gold_rank(dist, q);
    json rec{{"text", q.text},
             {"category", category_name(q.category)},
             {"answer_type", q.answer_type == AnswerType::entity ? "entity" : "time"},
             {"gold", golds},
             {"top", top},
             {"hit1", rank == 1},
             {"hit10", rank >= 1 && rank <= 10}};
    if (!path.is_null()) rec["path"] = path;
    return rec;
}

}  // namespace tkgqa
