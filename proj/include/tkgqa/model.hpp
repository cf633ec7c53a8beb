#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tkgqa/answer.hpp"
#include "tkgqa/autodiff.hpp"
#include "tkgqa/calibration.hpp"
#include "tkgqa/embedding.hpp"
#include "tkgqa/encoder.hpp"
#include "tkgqa/errors.hpp"
#include "tkgqa/gnn.hpp"
#include "tkgqa/kg.hpp"
#include "tkgqa/optim.hpp"
#include "tkgqa/rng.hpp"
#include "tkgqa/serialize.hpp"

namespace tkgqa {

struct QaConfig {
    std::size_t d_model = 64;
    std::size_t encoder_layers = 2;
    std::size_t fusion_layers = 2;
    std::size_t gnn_layers = 2;
    std::size_t hops = 2;           // diffusion cap per layer
    std::size_t subgraph_hops = 2;  // neighborhood radius around annotated entities
    std::size_t retrieve_k = 10;
    bool use_calibration = true;
    bool unfreeze_kg = false;
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    double lr = 1e-3;
    double init_std = 0.08;
    std::uint64_t seed = 7;

    json to_json() const {
        return json{{"d_model", d_model},
                    {"encoder_layers", encoder_layers},
                    {"fusion_layers", fusion_layers},
                    {"gnn_layers", gnn_layers},
                    {"hops", hops},
                    {"subgraph_hops", subgraph_hops},
                    {"retrieve_k", retrieve_k},
                    {"use_calibration", use_calibration},
                    {"unfreeze_kg", unfreeze_kg},
                    {"epochs", epochs},
                    {"batch_size", batch_size},
                    {"lr", lr},
                    {"init_std", init_std},
                    {"seed", seed}};
    }

    static QaConfig from_json(const json& j) {
        QaConfig c;
        auto u64 = [&](const char* k, std::size_t& out) {
            if (j.contains(k)) out = j.at(k).get<std::size_t>();
        };
        u64("d_model", c.d_model);
        u64("encoder_layers", c.encoder_layers);
        u64("fusion_layers", c.fusion_layers);
        u64("gnn_layers", c.gnn_layers);
        u64("hops", c.hops);
        u64("subgraph_hops", c.subgraph_hops);
        u64("retrieve_k", c.retrieve_k);
        u64("epochs", c.epochs);
        u64("batch_size", c.batch_size);
        if (j.contains("use_calibration")) c.use_calibration = j.at("use_calibration").get<bool>();
        if (j.contains("unfreeze_kg")) c.unfreeze_kg = j.at("unfreeze_kg").get<bool>();
        if (j.contains("lr")) c.lr = j.at("lr").get<double>();
        if (j.contains("init_std")) c.init_std = j.at("init_std").get<double>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

// Per-question static structure, built once and reused across epochs: token
// ids, the annotation-centered subgraph, its layout, and tokenized fact pool.
struct QuestionContext {
    std::vector<std::size_t> tokens;
    QuerySubgraph sg;
    GraphLayout layout;
    std::vector<std::vector<std::size_t>> fact_tokens;  // aligned with sg.fact_pool
};

// Caches valid for one optimizer step (parameter values fixed during the
// forward passes of a batch). `frozen` holds constant-graph summary values
// used for retrieval scoring; `live` holds trainable encodes of selected
// facts so duplicates across questions share one graph.
struct StepCache {
    std::unordered_map<std::size_t, Tensor> frozen;
    std::unordered_map<std::size_t, NodeRef> live;
};

struct ForwardResult {
    AnswerDistribution dist;
    GnnOutput gnn;
    std::vector<RetrievedSpo> retrieved;
    std::vector<NodeRef> spo_summaries;  // aligned with retrieved
    NodeRef q_fin;
};

struct TrainQaLog {
    std::vector<double> epoch_loss;
    std::size_t skipped = 0;  // instances whose gold answers left the candidate set
    bool diverged = false;

    json to_json() const {
        return json{
            {"epoch_loss", epoch_loss}, {"skipped", skipped}, {"diverged", diverged}};
    }
};

// The full question answering pipeline. Owns the trainable modules and the
// (by default frozen) KG tables; the fact store stays outside and must
// outlive the pipeline.
class QaPipeline {
public:
    QaPipeline(const KGStore& store, KgEmbeddings emb, Tokenizer tokenizer, QaConfig cfg)
        : store_(store),
          emb_(std::move(emb)),
          tokenizer_(std::move(tokenizer)),
          cfg_(cfg),
          rng_(cfg.seed),
          encoder_(ps_, "enc", tokenizer_.vocab_size(), cfg.d_model, cfg.encoder_layers, rng_,
                   cfg.init_std),
          calibration_(ps_, "cal", cfg.d_model, rng_, cfg.init_std),
          gnn_(ps_, "gnn", cfg.d_model, 2 * emb_.dim(), GnnConfig{cfg.gnn_layers, cfg.hops},
               rng_, cfg.init_std),
          fusion_(ps_, "fusion", cfg.d_model, cfg.fusion_layers, rng_, cfg.init_std),
          head_(ps_, "head", cfg.d_model, 2 * emb_.dim(), rng_, cfg.init_std) {
        emb_.set_trainable(cfg_.unfreeze_kg);
    }

    // Token vocabulary covering every question text and every verbalized
    // fact, in corpus order. Shared by generation and loading paths.
    static Tokenizer build_vocabulary(const KGStore& store,
                                      const std::vector<QuestionInstance>& questions) {
        Tokenizer tok;
        for (std::size_t f = 0; f < store.facts().size(); ++f)
            tok.fit(store.verbalize_fact(f));
        for (const QuestionInstance& q : questions) tok.fit(q.text);
        return tok;
    }

    const KGStore& store() const { return store_; }
    const KgEmbeddings& embeddings() const { return emb_; }
    KgEmbeddings& embeddings() { return emb_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    const QaConfig& config() const { return cfg_; }
    ParameterStore& params() { return ps_; }
    const ParameterStore& params() const { return ps_; }

    QuestionContext prepare(const QuestionInstance& q) const {
        QuestionContext ctx;
        ctx.tokens = tokenizer_.encode(q.text);
        ctx.sg = extract_subgraph(store_, q.entities, cfg_.subgraph_hops);
        ctx.layout = build_layout(store_, ctx.sg);
        ctx.fact_tokens.reserve(ctx.sg.fact_pool.size());
        for (std::size_t f : ctx.sg.fact_pool)
            ctx.fact_tokens.push_back(tokenizer_.encode(store_.verbalize_fact(f)));
        return ctx;
    }

    // One differentiable pass. Retrieval ranks the whole fact pool with a
    // constant-graph encoder snapshot; only the selected facts are encoded
    // trainably, which leaves gradients identical (unselected candidates
    // never touch the loss) at a fraction of the graph size.
    ForwardResult forward(const QuestionInstance& q, const QuestionContext& ctx,
                          StepCache* cache = nullptr) {
        ForwardResult out;
        EncodedSequence qe = encoder_.encode(ctx.tokens);
        NodeRef q_tokens = qe.token_states;
        if (cfg_.use_calibration && !ctx.fact_tokens.empty()) {
            TextEncoder snapshot = encoder_.frozen();
            std::vector<Tensor> pool;
            pool.reserve(ctx.fact_tokens.size());
            for (std::size_t i = 0; i < ctx.fact_tokens.size(); ++i) {
                std::size_t fact = ctx.sg.fact_pool[i];
                if (cache) {
                    auto it = cache->frozen.find(fact);
                    if (it != cache->frozen.end()) {
                        pool.push_back(it->second);
                        continue;
                    }
                }
                Tensor s = snapshot.encode(ctx.fact_tokens[i]).summary->value;
                if (cache) cache->frozen.emplace(fact, s);
                pool.push_back(std::move(s));
            }
            out.retrieved = retrieve_spo(snapshot.encode(ctx.tokens).summary->value, pool,
                                         ctx.sg.fact_pool, cfg_.retrieve_k);
            for (const RetrievedSpo& r : out.retrieved) {
                if (cache) {
                    auto it = cache->live.find(r.fact);
                    if (it != cache->live.end()) {
                        out.spo_summaries.push_back(it->second);
                        continue;
                    }
                }
                NodeRef s = encoder_.encode(ctx.fact_tokens[r.pool_index]).summary;
                if (cache) cache->live.emplace(r.fact, s);
                out.spo_summaries.push_back(s);
            }
            CalibrationResult cal = calibration_.calibrate(qe.token_states,
                                                           stack_rows(out.spo_summaries));
            q_tokens = cal.q_sem;
        }
        out.gnn = gnn_.forward(emb_, ctx.layout, ctx.sg);
        out.q_fin = fusion_.forward(q_tokens, out.gnn.pooled);
        auto [q_ent, q_tim] = head_.project(out.q_fin);
        out.dist = head_.score_candidates(q, ctx.sg, emb_, q_ent, q_tim);
        return out;
    }

    AnswerDistribution predict(const QuestionInstance& q) {
        QuestionContext ctx = prepare(q);
        return forward(q, ctx).dist;
    }

    // Minimizes mean cross-entropy over the dataset. Questions whose gold
    // answers fall outside their subgraph candidates are skipped and
    // counted. A non-finite batch loss aborts and restores the parameters
    // saved after the last completed epoch.
    TrainQaLog train(const std::vector<QuestionInstance>& questions) {
        std::vector<QuestionContext> ctxs;
        ctxs.reserve(questions.size());
        std::vector<std::size_t> usable;
        TrainQaLog log;
        for (std::size_t i = 0; i < questions.size(); ++i) {
            ctxs.push_back(prepare(questions[i]));
            bool ok = false;
            for (std::size_t a : questions[i].answers) {
                if (questions[i].answer_type == AnswerType::entity)
                    ok = ok || std::binary_search(ctxs[i].sg.candidate_entities.begin(),
                                                  ctxs[i].sg.candidate_entities.end(), a);
                else
                    ok = ok || std::binary_search(ctxs[i].sg.candidate_timestamps.begin(),
                                                  ctxs[i].sg.candidate_timestamps.end(), a);
            }
            if (ok)
                usable.push_back(i);
            else
                ++log.skipped;
        }
        if (usable.empty()) throw DataError("train: no question has a reachable gold answer");

        Adam opt(ps_, cfg_.lr);
        std::optional<Adam> kg_opt;
        if (cfg_.unfreeze_kg) kg_opt.emplace(emb_.params(), cfg_.lr);

        std::map<std::string, Tensor> good = snapshot_();
        for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
            std::vector<std::size_t> order = usable;
            rng_.shuffle(order);
            double total = 0.0;
            std::size_t counted = 0;
            for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
                std::size_t e = std::min(order.size(), b + cfg_.batch_size);
                ps_.zero_grad();
                if (cfg_.unfreeze_kg) emb_.params().zero_grad();
                // Divergence shows up either as a non-finite loss value or as
                // a NumericError from a saturated softmax; both abort.
                double v = 0.0;
                std::size_t batch_n = 0;
                try {
                    StepCache cache;
                    std::vector<NodeRef> losses;
                    for (std::size_t k = b; k < e; ++k) {
                        std::size_t qi = order[k];
                        ForwardResult f = forward(questions[qi], ctxs[qi], &cache);
                        losses.push_back(qa_loss(f.dist, questions[qi]));
                    }
                    NodeRef batch_loss = scale(sum_all(concat_scalars_(losses)),
                                               1.0 / static_cast<double>(losses.size()));
                    v = batch_loss->value(0);
                    batch_n = losses.size();
                    if (std::isfinite(v)) backward(batch_loss);
                } catch (const NumericError&) {
                    v = std::numeric_limits<double>::quiet_NaN();
                }
                if (!std::isfinite(v)) {
                    restore_(good);
                    log.diverged = true;
                    return log;
                }
                total += v * static_cast<double>(batch_n);
                counted += batch_n;
                opt.step();
                if (kg_opt) kg_opt->step();
            }
            log.epoch_loss.push_back(total / static_cast<double>(counted));
            good = snapshot_();
        }
        return log;
    }

    // Gradient magnitude of the predicted candidate's pre-softmax score with
    // respect to each retrieved fact's encoded summary, normalized to unit
    // sum. Requires the calibration branch: without it no fact summary
    // enters the computation.
    std::vector<double> attribute_spo(const QuestionInstance& q, const QuestionContext& ctx,
                                      ForwardResult* detail = nullptr) {
        if (!cfg_.use_calibration)
            throw UsageError("attribute_spo: calibration is disabled in this configuration");
        ForwardResult f = forward(q, ctx);
        if (f.retrieved.empty()) throw DataError("attribute_spo: empty fact pool");
        std::size_t best = 0;
        const Tensor& p = f.dist.probabilities->value;
        for (std::size_t i = 1; i < p.size(); ++i)
            if (p(i) > p(best)) best = i;
        NodeRef target = sum_all(slice_cols(f.dist.logits, best, best + 1));
        backward(target);
        std::vector<double> norms;
        double total = 0.0;
        for (const NodeRef& s : f.spo_summaries) {
            double n2 = 0.0;
            if (s->grad.size())
                for (double g : s->grad.data) n2 += g * g;
            norms.push_back(std::sqrt(n2));
            total += norms.back();
        }
        for (double& n : norms)
            n = total > 0.0 ? n / total : 0.0;
        if (detail) *detail = std::move(f);
        return norms;
    }

private:
    static NodeRef concat_scalars_(const std::vector<NodeRef>& xs) {
        if (xs.size() == 1) return xs[0];
        return concat(xs, 0);
    }

    std::map<std::string, Tensor> snapshot_() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, p] : ps_.items()) out.emplace("qa." + name, p->value);
        for (const auto& [name, p] : emb_.params().items()) out.emplace(name, p->value);
        return out;
    }

    void restore_(const std::map<std::string, Tensor>& snap) {
        for (const auto& [name, p] : ps_.items()) p->value = snap.at("qa." + name);
        for (const auto& [name, p] : emb_.params().items()) p->value = snap.at(name);
    }

    const KGStore& store_;
    KgEmbeddings emb_;
    Tokenizer tokenizer_;
    QaConfig cfg_;
    Rng rng_;
    ParameterStore ps_;
    TextEncoder encoder_;
    CalibrationModule calibration_;
    MultiHopGnn gnn_;
    KnowledgeFusion fusion_;
    AnswerHead head_;

public:
    TextEncoder& encoder() { return encoder_; }
    MultiHopGnn& gnn() { return gnn_; }
};

// ---- pipeline checkpointing ----

inline constexpr int kQaCheckpointVersion = 1;

inline json qa_checkpoint_json(const QaPipeline& pipe) {
    json j;
    j["format_version"] = kQaCheckpointVersion;
    j["kind"] = "qa_pipeline";
    j["config"] = pipe.config().to_json();
    j["vocabulary"] = pipe.tokenizer().to_json();
    j["dim"] = pipe.embeddings().dim();
    json params;
    for (const auto& [name, p] : pipe.params().items()) params[name] = tensor_to_json(p->value);
    j["params"] = params;
    json tables;
    for (const auto& [name, p] : pipe.embeddings().params().items())
        tables[name] = tensor_to_json(p->value);
    j["tables"] = tables;
    return j;
}

inline void save_qa_checkpoint(const QaPipeline& pipe, const std::string& path) {
    save_json_atomic(qa_checkpoint_json(pipe), path);
}

inline QaPipeline load_qa_checkpoint(const KGStore& store, const json& j) {
    if (!j.contains("kind") || j["kind"] != "qa_pipeline")
        throw DataError("checkpoint is not a qa_pipeline document");
    if (require_u64(j, "format_version") != kQaCheckpointVersion)
        throw DataError("unsupported checkpoint version: expected " +
                        std::to_string(kQaCheckpointVersion) + ", found " +
                        std::to_string(require_u64(j, "format_version")));
    QaConfig cfg = QaConfig::from_json(j.at("config"));
    std::size_t D = require_u64(j, "dim");
    Rng dummy(0);
    KgEmbeddings emb(store.entity_count(), store.relation_count_with_inverse(),
                     store.timestamp_count(), D, 0.0, dummy);
    const json& tables = j.at("tables");
    for (const auto& [name, p] : emb.params().items()) {
        if (!tables.contains(name)) throw DataError("checkpoint missing table: " + name);
        Tensor t = tensor_from_json(tables[name], name);
        if (!t.same_shape(p->value))
            throw DataError("table " + name + " shape mismatch: expected " +
                            p->value.shape_str() + ", found " + t.shape_str());
        p->value = std::move(t);
    }
    QaPipeline pipe(store, std::move(emb), Tokenizer::from_json(j.at("vocabulary")), cfg);
    const json& params = j.at("params");
    for (const auto& [name, p] : pipe.params().items()) {
        if (!params.contains(name)) throw DataError("checkpoint missing parameter: " + name);
        Tensor t = tensor_from_json(params[name], name);
        if (!t.same_shape(p->value))
            throw DataError("parameter " + name + " shape mismatch: expected " +
                            p->value.shape_str() + ", found " + t.shape_str());
        p->value = std::move(t);
    }
    return pipe;
}

inline QaPipeline load_qa_checkpoint_file(const KGStore& store, const std::string& path) {
    return load_qa_checkpoint(store, load_json_file(path));
}

}  // namespace tkgqa
