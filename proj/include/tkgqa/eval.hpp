#pragma once

#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "tkgqa/answer.hpp"
#include "tkgqa/errors.hpp"
#include "tkgqa/kg.hpp"
#include "tkgqa/serialize.hpp"

namespace tkgqa {

// Ranked candidate positions: probability descending, concatenated candidate
// position ascending on ties (entities ascending, then timestamps ascending).
inline std::vector<std::size_t> ranked_positions(const AnswerDistribution& dist) {
    std::vector<std::size_t> order(dist.size());
    std::iota(order.begin(), order.end(), 0);
    const Tensor& p = dist.probabilities->value;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (p(a) != p(b)) return p(a) > p(b);
        return a < b;
    });
    return order;
}

// Rank (1-based) of the best-ranked gold answer; 0 when no gold is a
// candidate.
inline std::size_t best_gold_rank(const AnswerDistribution& dist, const QuestionInstance& q) {
    std::vector<std::size_t> order = ranked_positions(dist);
    for (std::size_t r = 0; r < order.size(); ++r)
        for (std::size_t a : q.answers)
            if (dist.candidate_index(q.answer_type, a) ==
                static_cast<std::ptrdiff_t>(order[r]))
                return r + 1;
    return 0;
}

struct MetricCell {
    std::size_t total = 0, hit1 = 0, hit10 = 0;

    double hits1() const { return total ? static_cast<double>(hit1) / total : 0.0; }
    double hits10() const { return total ? static_cast<double>(hit10) / total : 0.0; }

    void tally(std::size_t rank) {
        ++total;
        if (rank >= 1 && rank <= 1) ++hit1;
        if (rank >= 1 && rank <= 10) ++hit10;
    }
};

struct EvalReport {
    MetricCell overall;
    std::map<std::string, MetricCell> by_category;
    MetricCell simple, complex_;  // question type: simple vs multi-fact reasoning
    MetricCell entity, time;      // answer type
    std::size_t unanswerable = 0;

    json to_json() const {
        auto cell = [](const MetricCell& c) {
            return json{{"total", c.total},
                        {"hit1", c.hit1},
                        {"hit10", c.hit10},
                        {"hits_at_1", c.hits1()},
                        {"hits_at_10", c.hits10()}};
        };
        json cats;
        for (const auto& [name, c] : by_category) cats[name] = cell(c);
        return json{{"overall", cell(overall)},
                    {"by_category", cats},
                    {"simple", cell(simple)},
                    {"complex", cell(complex_)},
                    {"entity", cell(entity)},
                    {"time", cell(time)},
                    {"unanswerable", unanswerable}};
    }

    std::string to_markdown() const {
        auto fmt = [](double v) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%.6f", v);
            return std::string(buf);
        };
        std::string md;
        md += "| slice | questions | Hits@1 | Hits@10 |\n";
        md += "|---|---|---|---|\n";
        auto row = [&](const std::string& name, const MetricCell& c) {
            md += "| " + name + " | " + std::to_string(c.total) + " | " + fmt(c.hits1()) +
                  " | " + fmt(c.hits10()) + " |\n";
        };
        row("overall", overall);
        row("simple", simple);
        row("complex", complex_);
        row("entity answers", entity);
        row("time answers", time);
        for (const auto& [name, c] : by_category) row(name, c);
        md += "\nunanswerable: " + std::to_string(unanswerable) + "\n";
        return md;
    }

    // Standalone bar chart of per-category Hits@1.
    std::string to_svg() const {
        auto fmt = [](double v) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%.4f", v);
            return std::string(buf);
        };
        const int bar_w = 90, gap = 30, h = 260, base = 200;
        int w = gap + static_cast<int>(by_category.size()) * (bar_w + gap);
        std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                          std::to_string(w) + "\" height=\"" + std::to_string(h) + "\">\n";
        svg += "<text x=\"" + std::to_string(w / 2) +
               "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">Hits@1 by category</text>\n";
        int x = gap;
        for (const auto& [name, c] : by_category) {
            int bh = static_cast<int>(c.hits1() * 150.0);
            svg += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(base - bh) +
                   "\" width=\"" + std::to_string(bar_w) + "\" height=\"" + std::to_string(bh) +
                   "\" fill=\"#4878a8\"/>\n";
            svg += "<text x=\"" + std::to_string(x + bar_w / 2) + "\" y=\"" +
                   std::to_string(base - bh - 6) + "\" text-anchor=\"middle\" font-size=\"11\">" +
                   fmt(c.hits1()) + "</text>\n";
            svg += "<text x=\"" + std::to_string(x + bar_w / 2) + "\" y=\"" +
                   std::to_string(base + 16) + "\" text-anchor=\"middle\" font-size=\"11\">" +
                   name + "</text>\n";
            x += bar_w + gap;
        }
        svg += "</svg>\n";
        return svg;
    }
};

// Scores a batch of questions with any predictor. A DataError from the
// predictor marks the question unanswerable: it still counts toward every
// total as a miss. With threads > 1 the questions are sharded across worker
// threads (the predictor must be safe to call concurrently, which holds for
// pipeline inference: forward passes only read parameters); ranks are tallied
// afterwards in question order, so the report is independent of thread count.
inline EvalReport evaluate(
    const std::function<AnswerDistribution(const QuestionInstance&)>& predict,
    const std::vector<QuestionInstance>& questions, std::size_t threads = 1) {
    // Rank per question: 0 means miss, npos means unanswerable.
    constexpr std::size_t kUnanswerable = static_cast<std::size_t>(-1);
    std::vector<std::size_t> ranks(questions.size(), 0);
    auto score_range = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            try {
                ranks[i] = best_gold_rank(predict(questions[i]), questions[i]);
            } catch (const DataError&) {
                ranks[i] = kUnanswerable;
            }
        }
    };
    if (threads <= 1 || questions.size() < 2) {
        score_range(0, questions.size());
    } else {
        std::size_t n = std::min(threads, questions.size());
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(n);
        for (std::size_t w = 0; w < n; ++w) {
            std::size_t lo = questions.size() * w / n;
            std::size_t hi = questions.size() * (w + 1) / n;
            pool.emplace_back([&, w, lo, hi] {
                try {
                    score_range(lo, hi);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (std::thread& t : pool) t.join();
        for (const std::exception_ptr& e : errors)
            if (e) std::rethrow_exception(e);
    }
    EvalReport rep;
    for (std::size_t i = 0; i < questions.size(); ++i) {
        const QuestionInstance& q = questions[i];
        std::size_t rank = ranks[i];
        if (rank == kUnanswerable) {
            ++rep.unanswerable;
            rank = 0;
        }
        rep.overall.tally(rank);
        rep.by_category[category_name(q.category)].tally(rank);
        (is_complex_category(q.category) ? rep.complex_ : rep.simple).tally(rank);
        (q.answer_type == AnswerType::entity ? rep.entity : rep.time).tally(rank);
    }
    return rep;
}

}  // namespace tkgqa
