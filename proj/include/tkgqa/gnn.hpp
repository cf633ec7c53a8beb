#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tkgqa/autodiff.hpp"
#include "tkgqa/embedding.hpp"
#include "tkgqa/encoder.hpp"
#include "tkgqa/errors.hpp"
#include "tkgqa/kg.hpp"
#include "tkgqa/optim.hpp"
#include "tkgqa/rng.hpp"

namespace tkgqa {

// Static per-question message-passing structure: subgraph edges sorted by
// source row so each row's logits are a contiguous slice, plus constant
// scatter matrices that sum multi-edge probabilities into matrix entries.
// Built once per question and reused across layers, epochs, and runs.
struct GraphLayout {
    std::size_t node_count = 0;
    std::vector<std::size_t> edge_order;  // indices into subgraph.edges
    std::vector<std::size_t> src_local, dst_local, rel_ids, ts_ids;
    std::vector<std::pair<std::size_t, std::size_t>> row_range;  // per node, into edge_order
    std::vector<NodeRef> scatter;   // per node: constant (k x n) 0/1, null when k == 0
    std::vector<NodeRef> self_row;  // per node: constant (1 x n) one-hot, null when k > 0
    NodeRef identity;               // constant n x n
};

inline GraphLayout build_layout(const KGStore& store, const QuerySubgraph& sg) {
    if (sg.nodes.empty()) throw UsageError("build_layout: empty subgraph");
    GraphLayout out;
    std::size_t n = sg.nodes.size();
    out.node_count = n;

    out.edge_order.resize(sg.edges.size());
    for (std::size_t i = 0; i < sg.edges.size(); ++i) out.edge_order[i] = i;
    auto src_of = [&](std::size_t sg_edge) {
        return sg.node_index.at(store.edges()[sg.edges[sg_edge]].src);
    };
    std::stable_sort(out.edge_order.begin(), out.edge_order.end(),
                     [&](std::size_t a, std::size_t b) { return src_of(a) < src_of(b); });

    for (std::size_t e : out.edge_order) {
        const Edge& ed = store.edges()[sg.edges[e]];
        out.src_local.push_back(sg.node_index.at(ed.src));
        out.dst_local.push_back(sg.node_index.at(ed.dst));
        out.rel_ids.push_back(ed.rel);
        out.ts_ids.push_back(ed.ts);
    }

    out.row_range.assign(n, {0, 0});
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t begin = pos;
        while (pos < out.src_local.size() && out.src_local[pos] == i) ++pos;
        out.row_range[i] = {begin, pos};
    }

    out.scatter.assign(n, nullptr);
    out.self_row.assign(n, nullptr);
    for (std::size_t i = 0; i < n; ++i) {
        auto [b, e] = out.row_range[i];
        if (b == e) {
            Tensor row({1, n});
            row(0, i) = 1.0;
            out.self_row[i] = constant(std::move(row));
        } else {
            Tensor sc({e - b, n});
            for (std::size_t k = b; k < e; ++k) sc(k - b, out.dst_local[k]) = 1.0;
            out.scatter[i] = constant(std::move(sc));
        }
    }

    Tensor eye({n, n});
    for (std::size_t i = 0; i < n; ++i) eye(i, i) = 1.0;
    out.identity = constant(std::move(eye));
    return out;
}

// Attention values retained per layer for interpretability: the dense
// normalized matrix plus one probability per edge in layout order.
struct TraceLayer {
    Tensor attention;
    std::vector<double> edge_probs;
};

struct AttentionTrace {
    std::vector<TraceLayer> layers;
};

struct GnnOutput {
    NodeRef node_states;             // n x d after all propagations
    NodeRef pooled;                  // d, mean over nodes
    std::vector<NodeRef> attention;  // per-layer attention matrices (n x n)
    AttentionTrace trace;
};

struct GnnConfig {
    std::size_t layers = 2;
    std::size_t hops = 2;  // diffusion power limit; 0 keeps only the identity term
};

// Attention-diffusion message passing: per-edge logits from node, relation,
// and timestamp features; row softmax; D = sum_tau xi_tau A^tau; H <- D H.
class MultiHopGnn {
public:
    MultiHopGnn() = default;

    MultiHopGnn(ParameterStore& ps, const std::string& prefix, std::size_t d_model,
                std::size_t kg_width, GnnConfig cfg, Rng& rng, double init_std = 0.08)
        : d_(d_model), cfg_(cfg) {
        proj_entity_ = ps.add_normal(prefix + ".proj_entity", {kg_width, d_}, rng, init_std);
        proj_relation_ = ps.add_normal(prefix + ".proj_relation", {kg_width, d_}, rng, init_std);
        proj_timestamp_ = ps.add_normal(prefix + ".proj_timestamp", {kg_width, d_}, rng, init_std);
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            std::string base = prefix + ".layer" + std::to_string(l);
            layers_.push_back({ps.add_normal(base + ".w_ad", {4 * d_, d_}, rng, init_std),
                               ps.add_normal(base + ".beta", {d_}, rng, init_std)});
        }
        // Uniform mixing keeps D row-stochastic at initialization.
        Tensor xi0({cfg_.hops + 1}, std::vector<double>(cfg_.hops + 1,
                                                        1.0 / static_cast<double>(cfg_.hops + 1)));
        xi_ = ps.add(prefix + ".xi", xi0);
    }

    std::size_t width() const { return d_; }
    const GnnConfig& config() const { return cfg_; }
    NodeRef mixing_weights() const { return xi_; }

    // Edge logit: beta . relu(W_ad [h_i || h_j || h_r || h_t]); softmax per
    // source row over that row's edges; probabilities of multi-timestamp
    // duplicates of one (i, j) pair sum into a single matrix entry; rows
    // without outgoing edges fall back to a unit self-loop.
    NodeRef edge_attention(NodeRef h, NodeRef rel_feats, NodeRef ts_feats,
                           const GraphLayout& layout, std::size_t layer,
                           std::vector<double>* edge_probs_out = nullptr) const {
        TKGQA_REQUIRE(layer < layers_.size(), "edge_attention: layer out of range");
        std::size_t n = layout.node_count;
        NodeRef logits;
        if (!layout.edge_order.empty()) {
            NodeRef feats = concat({rows(h, layout.src_local), rows(h, layout.dst_local),
                                    rel_feats, ts_feats},
                                   1);
            logits = matmul(relu(matmul(feats, layers_[layer].w_ad)), layers_[layer].beta);
        }
        if (edge_probs_out) edge_probs_out->assign(layout.edge_order.size(), 0.0);
        std::vector<NodeRef> a_rows;
        a_rows.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto [b, e] = layout.row_range[i];
            if (b == e) {
                a_rows.push_back(layout.self_row[i]);
                continue;
            }
            NodeRef probs = row_softmax(reshape(slice_cols(logits, b, e), {1, e - b}));
            if (edge_probs_out)
                for (std::size_t k = b; k < e; ++k)
                    (*edge_probs_out)[k] = probs->value.data[k - b];
            a_rows.push_back(matmul(probs, layout.scatter[i]));
        }
        return concat(a_rows, 0);
    }

    // D = sum_{tau=0}^{hops} xi_tau A^tau with A^0 = I.
    NodeRef diffuse(NodeRef a, const GraphLayout& layout) const {
        NodeRef d = mul_scalar(layout.identity, slice_cols(xi_, 0, 1));
        NodeRef power = a;
        for (std::size_t tau = 1; tau <= cfg_.hops; ++tau) {
            d = add(d, mul_scalar(power, slice_cols(xi_, tau, tau + 1)));
            if (tau < cfg_.hops) power = matmul(power, a);
        }
        return d;
    }

    GnnOutput forward(const KgEmbeddings& emb, const GraphLayout& layout,
                      const QuerySubgraph& sg) const {
        NodeRef h = matmul(rows(emb.entity_table(), sg.nodes), proj_entity_);
        NodeRef rel_feats, ts_feats;
        if (!layout.edge_order.empty()) {
            rel_feats = matmul(rows(emb.relation_table(), layout.rel_ids), proj_relation_);
            ts_feats = matmul(rows(emb.timestamp_table(), layout.ts_ids), proj_timestamp_);
        }
        GnnOutput out;
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            std::vector<double> edge_probs;
            NodeRef a = edge_attention(h, rel_feats, ts_feats, layout, l, &edge_probs);
            out.attention.push_back(a);
            out.trace.layers.push_back({a->value, std::move(edge_probs)});
            h = matmul(diffuse(a, layout), h);
        }
        out.node_states = h;
        out.pooled = mean_axis(h, 0);
        return out;
    }

private:
    struct Layer {
        NodeRef w_ad;  // 4d x d
        NodeRef beta;  // d
    };
    std::size_t d_ = 0;
    GnnConfig cfg_;
    NodeRef proj_entity_, proj_relation_, proj_timestamp_;
    std::vector<Layer> layers_;
    NodeRef xi_;
};

// Appends the graph summary as one extra token, runs self-attention layers,
// and mean-pools. Zero-weight layers make this an exact mean of the inputs.
class KnowledgeFusion {
public:
    KnowledgeFusion() = default;

    KnowledgeFusion(ParameterStore& ps, const std::string& prefix, std::size_t d_model,
                    std::size_t layers, Rng& rng, double init_std = 0.08)
        : stack_(ps, prefix, layers, d_model, rng, init_std) {}

    NodeRef forward(NodeRef q_sem_tokens, NodeRef q_mlh) const {
        NodeRef seq = concat({q_sem_tokens, reshape(q_mlh, {1, stack_.width()})}, 0);
        return mean_axis(stack_.forward(seq), 0);
    }

private:
    SelfAttentionStack stack_;
};

struct PathStep {
    std::size_t src = 0;  // global entity ids
    std::size_t dst = 0;
    std::size_t relation = 0;   // dominant contributing edge's annotation
    std::size_t timestamp = 0;
    double attention = 0.0;     // the A entry crossed by this step
};

struct PathResult {
    bool found = false;
    std::string diagnostic;
    std::vector<std::size_t> nodes;  // global entity ids, start through target
    std::vector<PathStep> steps;
    double score = 0.0;  // product of step attentions, 1.0 for an empty path
};

// Best-first (max-product) search over the final layer's attention matrix
// from any annotated entity to the predicted answer node. Runs on retained
// values, never on graph nodes; self-loop entries are not traversable.
inline PathResult extract_path(const KGStore& store, const QuerySubgraph& sg,
                               const GraphLayout& layout, const AttentionTrace& trace,
                               const std::vector<std::size_t>& start_entities,
                               std::size_t target_entity) {
    PathResult out;
    if (trace.layers.empty()) {
        out.diagnostic = "no attention trace retained";
        return out;
    }
    if (start_entities.empty()) {
        out.diagnostic = "no start entities";
        return out;
    }
    auto target_it = sg.node_index.find(target_entity);
    if (target_it == sg.node_index.end()) {
        out.diagnostic = "answer node not in subgraph";
        return out;
    }
    std::size_t target = target_it->second;
    std::size_t n = layout.node_count;
    const Tensor& A = trace.layers.back().attention;

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> cost(n, inf);  // sum of -log attention along best path
    std::vector<std::size_t> parent(n, n);
    bool any_start = false;
    std::set<std::pair<double, std::size_t>> queue;
    for (std::size_t s : start_entities) {
        auto it = sg.node_index.find(s);
        if (it == sg.node_index.end()) continue;
        any_start = true;
        if (cost[it->second] > 0.0) {
            cost[it->second] = 0.0;
            queue.insert({0.0, it->second});
        }
    }
    if (!any_start) {
        out.diagnostic = "no start entity present in subgraph";
        return out;
    }

    while (!queue.empty()) {
        auto [c, i] = *queue.begin();
        queue.erase(queue.begin());
        if (i == target) break;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double w = A(i, j);
            if (w <= 0.0) continue;
            double next = c - std::log(w);
            if (next < cost[j]) {
                queue.erase({cost[j], j});
                cost[j] = next;
                parent[j] = i;
                queue.insert({next, j});
            }
        }
    }

    if (cost[target] == inf) {
        out.diagnostic = "answer node unreachable from annotated entities";
        return out;
    }

    std::vector<std::size_t> chain{target};
    while (parent[chain.back()] != n) chain.push_back(parent[chain.back()]);
    std::reverse(chain.begin(), chain.end());

    out.found = true;
    out.score = 1.0;
    for (std::size_t i : chain) out.nodes.push_back(sg.nodes[i]);
    const std::vector<double>& probs = trace.layers.back().edge_probs;
    for (std::size_t s = 0; s + 1 < chain.size(); ++s) {
        std::size_t i = chain[s], j = chain[s + 1];
        PathStep step;
        step.src = sg.nodes[i];
        step.dst = sg.nodes[j];
        step.attention = A(i, j);
        out.score *= step.attention;
        // Annotate with the highest-probability edge behind this entry.
        double best = -1.0;
        auto [b, e] = layout.row_range[i];
        for (std::size_t k = b; k < e; ++k)
            if (layout.dst_local[k] == j && probs[k] > best) {
                best = probs[k];
                step.relation = layout.rel_ids[k];
                step.timestamp = layout.ts_ids[k];
            }
        out.steps.push_back(step);
    }
    return out;
}

}  // namespace tkgqa
