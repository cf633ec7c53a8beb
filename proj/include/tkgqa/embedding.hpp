#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "tkgqa/autodiff.hpp"
#include "tkgqa/errors.hpp"
#include "tkgqa/kg.hpp"
#include "tkgqa/optim.hpp"
#include "tkgqa/rng.hpp"
#include "tkgqa/serialize.hpp"
#include "tkgqa/tensor.hpp"

namespace tkgqa {

// Sinusoidal position encoding: even slot c=2i carries sin(k / 10000^{2i/dim}),
// the following odd slot carries the matching cos. Values lie in [-1, 1] and
// distinct k give distinct vectors over any desk-scale vocabulary.
inline Tensor position_encoding(std::size_t k, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0)
        throw UsageError("position encoding width must be even, got " + std::to_string(dim));
    Tensor out({dim});
    for (std::size_t i = 0; i * 2 < dim; ++i) {
        double angle = static_cast<double>(k) /
                       std::pow(10000.0, (2.0 * static_cast<double>(i)) / static_cast<double>(dim));
        out.data[2 * i] = std::sin(angle);
        out.data[2 * i + 1] = std::cos(angle);
    }
    return out;
}

// Elementwise complex product of split-representation vectors or matrices
// (first half real parts, second half imaginary parts along the last axis).
inline NodeRef complex_mul(const NodeRef& a, const NodeRef& b, std::size_t D) {
    std::size_t width = a->value.rank() == 2 ? a->value.shape[1] : a->value.shape[0];
    if (width != 2 * D)
        throw ShapeError("complex_mul: expected width " + std::to_string(2 * D) + ", got " +
                         std::to_string(width));
    NodeRef ar = slice_cols(a, 0, D), ai = slice_cols(a, D, 2 * D);
    NodeRef br = slice_cols(b, 0, D), bi = slice_cols(b, D, 2 * D);
    NodeRef re = sub(mul(ar, br), mul(ai, bi));
    NodeRef im = add(mul(ar, bi), mul(ai, br));
    return concat({re, im}, a->value.rank() == 2 ? 1 : 0);
}

// Eq-form score: Re(sum_d s_d * r_d * t_d * conj(o_d)). With the split
// representation this reduces to a plain dot product of (s*r*t) with o.
inline NodeRef tcomplex_score_node(const NodeRef& s, const NodeRef& r, const NodeRef& t,
                                   const NodeRef& o, std::size_t D) {
    NodeRef u = complex_mul(complex_mul(s, r, D), t, D);
    return dot(u, o);
}

struct KgTrainConfig {
    std::size_t dim = 32;        // complex dimension D; rows have width 2D
    double lambda = 0.3;         // weight of the time-order auxiliary loss
    std::size_t epochs = 100;
    double lr = 1e-2;
    std::size_t batch_size = 64;
    std::uint64_t seed = 17;
    double reg_weight = 0.0;     // cube-magnitude penalty on touched rows
    std::size_t aux_pairs_per_batch = 10;
    double init_std = 0.05;
    bool margin_loss = false;    // margin-ranking alternative to cross-entropy
    double margin = 1.0;
    std::size_t margin_negatives = 10;

    json to_json() const {
        return json{{"dim", dim},
                    {"lambda", lambda},
                    {"epochs", epochs},
                    {"lr", lr},
                    {"batch_size", batch_size},
                    {"seed", seed},
                    {"reg_weight", reg_weight},
                    {"aux_pairs_per_batch", aux_pairs_per_batch},
                    {"init_std", init_std},
                    {"margin_loss", margin_loss},
                    {"margin", margin},
                    {"margin_negatives", margin_negatives}};
    }

    static KgTrainConfig from_json(const json& j) {
        KgTrainConfig c;
        auto u64 = [&](const char* k, std::size_t& out) {
            if (j.contains(k)) out = j.at(k).get<std::size_t>();
        };
        auto f64 = [&](const char* k, double& out) {
            if (j.contains(k)) out = j.at(k).get<double>();
        };
        u64("dim", c.dim);
        u64("epochs", c.epochs);
        u64("batch_size", c.batch_size);
        u64("aux_pairs_per_batch", c.aux_pairs_per_batch);
        u64("margin_negatives", c.margin_negatives);
        f64("lambda", c.lambda);
        f64("lr", c.lr);
        f64("reg_weight", c.reg_weight);
        f64("init_std", c.init_std);
        f64("margin", c.margin);
        if (j.contains("margin_loss")) c.margin_loss = j.at("margin_loss").get<bool>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

// Trained embedding state: entity/relation/timestamp tables of width 2D plus
// the order-task weight vector, and the fixed position-encoding table.
class KgEmbeddings {
public:
    KgEmbeddings(std::size_t entities, std::size_t relations, std::size_t timestamps,
                 std::size_t D, double init_std, Rng& rng)
        : D_(D) {
        entity_ = params_.add_normal("kg.entity", {entities, 2 * D}, rng, init_std);
        relation_ = params_.add_normal("kg.relation", {relations, 2 * D}, rng, init_std);
        timestamp_ = params_.add_normal("kg.timestamp", {timestamps, 2 * D}, rng, init_std);
        w_ts_ = params_.add_normal("kg.w_ts", {2 * D}, rng, init_std);
        build_positions(timestamps);
    }

    std::size_t dim() const { return D_; }
    std::size_t entity_count() const { return entity_->value.shape[0]; }
    std::size_t relation_count() const { return relation_->value.shape[0]; }
    std::size_t timestamp_count() const { return timestamp_->value.shape[0]; }

    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    NodeRef entity_table() const { return entity_; }
    NodeRef relation_table() const { return relation_; }
    NodeRef timestamp_table() const { return timestamp_; }
    NodeRef w_ts() const { return w_ts_; }
    const Tensor& positions() const { return positions_; }

    NodeRef entity_row(std::size_t id) const {
        check_id(id, entity_count(), "entity");
        return row(entity_, id);
    }
    NodeRef relation_row(std::size_t id) const {
        check_id(id, relation_count(), "relation");
        return row(relation_, id);
    }
    NodeRef timestamp_row(std::size_t id) const {
        check_id(id, timestamp_count(), "timestamp");
        return row(timestamp_, id);
    }

    // QA training freezes these tables by default so the time-order structure
    // learned in pretraining survives.
    void set_trainable(bool on) {
        entity_->requires_grad = on;
        relation_->requires_grad = on;
        timestamp_->requires_grad = on;
        w_ts_->requires_grad = on;
    }

    // ---- value-only fast paths (no graph construction) ----

    double score(std::size_t s, std::size_t r, std::size_t o, std::size_t t) const {
        check_id(s, entity_count(), "entity");
        check_id(o, entity_count(), "entity");
        check_id(r, relation_count(), "relation");
        check_id(t, timestamp_count(), "timestamp");
        std::vector<double> u = triple_product(s, r, t);
        const double* eo = &entity_->value.data[o * 2 * D_];
        double acc = 0.0;
        for (std::size_t d = 0; d < 2 * D_; ++d) acc += u[d] * eo[d];
        return acc;
    }

    // Scores of every entity as object of (s, r, ?, t).
    Tensor score_all_objects(std::size_t s, std::size_t r, std::size_t t) const {
        check_id(s, entity_count(), "entity");
        check_id(r, relation_count(), "relation");
        check_id(t, timestamp_count(), "timestamp");
        std::vector<double> u = triple_product(s, r, t);
        std::size_t N = entity_count(), W = 2 * D_;
        Tensor out({N});
        for (std::size_t e = 0; e < N; ++e) {
            const double* eo = &entity_->value.data[e * W];
            double acc = 0.0;
            for (std::size_t d = 0; d < W; ++d) acc += u[d] * eo[d];
            out.data[e] = acc;
        }
        return out;
    }

    // Logit of "timestamp m precedes timestamp n". Bitwise antisymmetric:
    // swapping arguments negates the result exactly.
    double order_logit(std::size_t m, std::size_t n) const {
        check_id(m, timestamp_count(), "timestamp");
        check_id(n, timestamp_count(), "timestamp");
        std::size_t W = 2 * D_;
        const double* em = &timestamp_->value.data[m * W];
        const double* en = &timestamp_->value.data[n * W];
        const double* pm = &positions_.data[m * W];
        const double* pn = &positions_.data[n * W];
        const double* w = w_ts_->value.data.data();
        double z = 0.0;
        for (std::size_t d = 0; d < W; ++d) z += w[d] * ((em[d] + pm[d]) - (en[d] + pn[d]));
        return z;
    }

    // Probability that m precedes n. Evaluated so that the pair sums to 1
    // exactly: the negative branch returns the complement of the positive
    // branch's value (1-p is exact for p in [0.5, 1]).
    double order_prob(std::size_t m, std::size_t n) const {
        double z = order_logit(m, n);
        if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
        return 1.0 - 1.0 / (1.0 + std::exp(z));
    }

private:
    void build_positions(std::size_t timestamps) {
        positions_ = Tensor({timestamps == 0 ? 1 : timestamps, 2 * D_});
        for (std::size_t k = 0; k < timestamps; ++k) {
            Tensor p = position_encoding(k, 2 * D_);
            std::copy(p.data.begin(), p.data.end(), positions_.data.begin() + k * 2 * D_);
        }
    }

    static void check_id(std::size_t id, std::size_t bound, const char* what) {
        if (id >= bound)
            throw UsageError(std::string(what) + " id " + std::to_string(id) +
                             " out of range (size " + std::to_string(bound) + ")");
    }

    std::vector<double> triple_product(std::size_t s, std::size_t r, std::size_t t) const {
        std::size_t W = 2 * D_;
        const double* es = &entity_->value.data[s * W];
        const double* er = &relation_->value.data[r * W];
        const double* et = &timestamp_->value.data[t * W];
        std::vector<double> u(W);
        for (std::size_t d = 0; d < D_; ++d) {
            double sr_re = es[d] * er[d] - es[D_ + d] * er[D_ + d];
            double sr_im = es[d] * er[D_ + d] + es[D_ + d] * er[d];
            u[d] = sr_re * et[d] - sr_im * et[D_ + d];
            u[D_ + d] = sr_re * et[D_ + d] + sr_im * et[d];
        }
        return u;
    }

    std::size_t D_;
    ParameterStore params_;
    NodeRef entity_, relation_, timestamp_, w_ts_;
    Tensor positions_;
};

struct KgTrainLog {
    std::vector<double> epoch_loss;       // mean combined loss per epoch
    std::vector<double> epoch_aux_loss;   // mean auxiliary term per epoch
};

namespace detail {

// Stable binary cross-entropy on logits: -a*log(sigma(z)) - (1-a)*log(1-sigma(z))
// equals softplus(z) - a*z.
inline NodeRef bce_with_logits(const NodeRef& z, const Tensor& labels) {
    return mean_all(sub(softplus(z), mul(z, constant(labels))));
}

}  // namespace detail

inline Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& idx) {
    std::size_t d = m.shape[1];
    Tensor out({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(&m.data[idx[r] * d], &m.data[idx[r] * d] + d, &out.data[r * d]);
    return out;
}

// Joint objective: multiclass object-recovery loss over every expanded edge
// (forward and inverse) plus lambda times the timestamp-order auxiliary task.
inline KgEmbeddings train_kg(const KGStore& store, const KgTrainConfig& cfg,
                             KgTrainLog* log = nullptr) {
    if (store.edges().empty()) throw DataError("train_kg: store has no edges");
    Rng master(cfg.seed);
    Rng init_rng = master.fork(1);
    Rng shuffle_rng = master.fork(2);
    Rng aux_rng = master.fork(3);
    Rng neg_rng = master.fork(4);

    KgEmbeddings emb(store.entity_count(), store.relation_count_with_inverse(),
                     store.timestamp_count(), cfg.dim, cfg.init_std, init_rng);
    Adam opt(emb.params(), cfg.lr);

    std::size_t T = store.timestamp_count();
    std::size_t N = store.entity_count();
    std::size_t D = cfg.dim;
    bool aux_enabled = cfg.lambda != 0.0 && cfg.aux_pairs_per_batch > 0 && T >= 2;

    std::vector<std::size_t> order(store.edges().size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0, epoch_aux = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<std::size_t> subj, rel, obj, ts;
            for (std::size_t i = start; i < stop; ++i) {
                const Edge& e = store.edges()[order[i]];
                subj.push_back(e.src);
                rel.push_back(e.rel);
                obj.push_back(e.dst);
                ts.push_back(e.ts);
            }
            emb.params().zero_grad();

            NodeRef S = rows(emb.entity_table(), subj);
            NodeRef R = rows(emb.relation_table(), rel);
            NodeRef Tm = rows(emb.timestamp_table(), ts);
            NodeRef U = complex_mul(complex_mul(S, R, D), Tm, D);      // B x 2D
            NodeRef logits = matmul(U, transpose(emb.entity_table())); // B x N

            NodeRef loss;
            if (cfg.margin_loss) {
                NodeRef pos = pick(logits, obj);
                std::vector<NodeRef> terms;
                for (std::size_t k = 0; k < cfg.margin_negatives; ++k) {
                    std::vector<std::size_t> neg(obj.size());
                    for (std::size_t i = 0; i < neg.size(); ++i)
                        neg[i] = static_cast<std::size_t>(
                            neg_rng.uniform_int(0, static_cast<std::int64_t>(N) - 1));
                    NodeRef gap = add_const(sub(pick(logits, neg), pos), cfg.margin);
                    terms.push_back(mean_all(relu(gap)));
                }
                loss = terms.front();
                for (std::size_t k = 1; k < terms.size(); ++k) loss = add(loss, terms[k]);
                loss = scale(loss, 1.0 / static_cast<double>(terms.size()));
            } else {
                NodeRef lp = log_row_softmax(logits);
                loss = scale(mean_all(pick(lp, obj)), -1.0);
            }

            if (cfg.reg_weight != 0.0) {
                // Cube-magnitude penalty over the rows touched by the batch.
                auto cube = [](const NodeRef& x) {
                    NodeRef mag = add(relu(x), relu(scale(x, -1.0)));
                    return mean_all(pow_elem(mag, 3.0));
                };
                NodeRef reg = add(add(cube(S), cube(R)),
                                  add(cube(Tm), cube(rows(emb.entity_table(), obj))));
                loss = add(loss, scale(reg, cfg.reg_weight));
            }

            double aux_value = 0.0;
            if (aux_enabled) {
                std::vector<std::size_t> ms, ns;
                Tensor labels({cfg.aux_pairs_per_batch});
                for (std::size_t p = 0; p < cfg.aux_pairs_per_batch; ++p) {
                    std::size_t m = static_cast<std::size_t>(
                        aux_rng.uniform_int(0, static_cast<std::int64_t>(T) - 1));
                    std::size_t n = static_cast<std::size_t>(
                        aux_rng.uniform_int(0, static_cast<std::int64_t>(T) - 2));
                    if (n >= m) ++n;  // distinct pair, uniform over ordered pairs
                    ms.push_back(m);
                    ns.push_back(n);
                    labels.data[p] = m < n ? 1.0 : 0.0;
                }
                NodeRef Em = add(rows(emb.timestamp_table(), ms),
                                 constant(gather_rows(emb.positions(), ms)));
                NodeRef En = add(rows(emb.timestamp_table(), ns),
                                 constant(gather_rows(emb.positions(), ns)));
                NodeRef z = matmul(sub(Em, En), emb.w_ts());
                NodeRef aux = detail::bce_with_logits(z, labels);
                aux_value = aux->value.data[0];
                loss = add(loss, scale(aux, cfg.lambda));
            }

            if (!loss->value.all_finite())
                throw NumericError("train_kg: non-finite loss at epoch " + std::to_string(epoch));
            backward(loss);
            opt.step();
            epoch_loss += loss->value.data[0];
            epoch_aux += aux_value;
            ++batches;
        }
        if (log) {
            log->epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
            log->epoch_aux_loss.push_back(epoch_aux / static_cast<double>(batches));
        }
    }
    return emb;
}

// All entities ranked as objects of (s, r, ?, t): descending score, ties by
// ascending entity id.
inline std::vector<std::size_t> link_predict(const KgEmbeddings& emb, std::size_t s,
                                             std::size_t r, std::size_t t) {
    Tensor scores = emb.score_all_objects(s, r, t);
    std::vector<std::size_t> ids(scores.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
        if (scores.data[a] != scores.data[b]) return scores.data[a] > scores.data[b];
        return a < b;
    });
    return ids;
}

// Fraction of ordered timestamp pairs (m < n) the model ranks correctly,
// enumerated exhaustively.
inline double pairwise_order_accuracy(const KgEmbeddings& emb) {
    std::size_t T = emb.timestamp_count();
    if (T < 2) return 1.0;
    std::size_t hits = 0, total = 0;
    for (std::size_t m = 0; m < T; ++m)
        for (std::size_t n = m + 1; n < T; ++n) {
            ++total;
            if (emb.order_prob(m, n) > 0.5) ++hits;
        }
    return static_cast<double>(hits) / static_cast<double>(total);
}

// Filtered Hits@1 over held-in (s, r, ?, t) queries: every forward edge is a
// query; other true objects of the same (s, r, t) are excluded from the
// ranking before the cutoff.
inline double filtered_hits_at_1(const KGStore& store, const KgEmbeddings& emb) {
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::set<std::size_t>> truth;
    std::size_t R = store.relation_count();
    for (const Edge& e : store.edges())
        if (e.rel < R) truth[{e.src, e.rel, e.ts}].insert(e.dst);
    std::size_t hits = 0, total = 0;
    for (const auto& [key, objects] : truth) {
        auto [s, r, t] = key;
        Tensor scores = emb.score_all_objects(s, r, t);
        for (std::size_t gold : objects) {
            ++total;
            bool beaten = false;
            for (std::size_t e = 0; e < scores.size() && !beaten; ++e) {
                if (e == gold) continue;
                if (objects.count(e)) continue;  // filtered: other true objects
                if (scores.data[e] > scores.data[gold] ||
                    (scores.data[e] == scores.data[gold] && e < gold))
                    beaten = true;
            }
            if (!beaten) ++hits;
        }
    }
    if (total == 0) throw DataError("filtered_hits_at_1: no queries");
    return static_cast<double>(hits) / static_cast<double>(total);
}

// ---- checkpointing ----

inline constexpr int kKgCheckpointVersion = 1;

inline json kg_checkpoint_json(const KgEmbeddings& emb, const KgTrainConfig& cfg) {
    json j;
    j["format_version"] = kKgCheckpointVersion;
    j["kind"] = "kg_embeddings";
    j["dim"] = emb.dim();
    j["entity_count"] = emb.entity_count();
    j["relation_count"] = emb.relation_count();
    j["timestamp_count"] = emb.timestamp_count();
    j["config"] = cfg.to_json();
    j["seed"] = cfg.seed;
    json tables;
    for (const auto& [name, p] : emb.params().items()) tables[name] = tensor_to_json(p->value);
    j["tables"] = tables;
    return j;
}

inline void save_kg_checkpoint(const KgEmbeddings& emb, const KgTrainConfig& cfg,
                               const std::string& path) {
    save_json_atomic(kg_checkpoint_json(emb, cfg), path);
}

inline KgEmbeddings load_kg_checkpoint(const json& j) {
    if (!j.contains("kind") || j["kind"] != "kg_embeddings")
        throw DataError("checkpoint is not a kg_embeddings document");
    if (require_u64(j, "format_version") != kKgCheckpointVersion)
        throw DataError("unsupported checkpoint version: expected " +
                        std::to_string(kKgCheckpointVersion) + ", found " +
                        std::to_string(require_u64(j, "format_version")));
    std::size_t D = require_u64(j, "dim");
    std::size_t ents = require_u64(j, "entity_count");
    std::size_t rels = require_u64(j, "relation_count");
    std::size_t tims = require_u64(j, "timestamp_count");
    Rng dummy(0);
    KgEmbeddings emb(ents, rels, tims, D, 0.0, dummy);
    const json& tables = j.at("tables");
    for (const auto& [name, p] : emb.params().items()) {
        if (!tables.contains(name)) throw DataError("checkpoint missing table: " + name);
        Tensor t = tensor_from_json(tables[name], name);
        if (!t.same_shape(p->value))
            throw DataError("table " + name + " shape mismatch: expected " +
                            p->value.shape_str() + ", found " + t.shape_str());
        p->value = std::move(t);
    }
    return emb;
}

inline KgEmbeddings load_kg_checkpoint_file(const std::string& path) {
    return load_kg_checkpoint(load_json_file(path));
}

// Guard used when a checkpoint must match a particular store.
inline void validate_kg_checkpoint(const KgEmbeddings& emb, const KGStore& store) {
    if (emb.entity_count() != store.entity_count() ||
        emb.relation_count() != store.relation_count_with_inverse() ||
        emb.timestamp_count() != store.timestamp_count())
        throw DataError("checkpoint vocabulary sizes do not match the fact file: expected (" +
                        std::to_string(store.entity_count()) + ", " +
                        std::to_string(store.relation_count_with_inverse()) + ", " +
                        std::to_string(store.timestamp_count()) + "), found (" +
                        std::to_string(emb.entity_count()) + ", " +
                        std::to_string(emb.relation_count()) + ", " +
                        std::to_string(emb.timestamp_count()) + ")");
}

}  // namespace tkgqa
