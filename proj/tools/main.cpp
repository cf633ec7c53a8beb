// Command-line surface: dataset generation, embedding and pipeline training,
// evaluation reports, interpretability dumps, and ablation comparisons.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
// Options merge in precedence order: built-in defaults, then the --config
// JSON file (sections "world", "kg", "qa"), then the TKGQA_SEED environment
// variable, then explicit flags.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tkgqa/dataset.hpp"
#include "tkgqa/embedding.hpp"
#include "tkgqa/eval.hpp"
#include "tkgqa/explain.hpp"
#include "tkgqa/kg.hpp"
#include "tkgqa/model.hpp"

namespace {

using namespace tkgqa;

// Deferred flag application so explicit flags can override the config file.
struct FlagAppliers {
    std::vector<std::function<void()>> fns;
    void run() const {
        for (const auto& f : fns) f();
    }
};

template <typename T>
void bind_flag(CLI::App* cmd, const std::string& flag, T& slot, FlagAppliers& ap,
               const std::string& desc) {
    auto tmp = std::make_shared<T>(slot);
    CLI::Option* opt = cmd->add_option(flag, *tmp, desc);
    ap.fns.push_back([opt, tmp, &slot] {
        if (opt->count()) slot = *tmp;
    });
}

void bind_toggle(CLI::App* cmd, const std::string& flag, bool& slot, bool value, FlagAppliers& ap,
                 const std::string& desc) {
    auto tmp = std::make_shared<bool>(false);
    CLI::Option* opt = cmd->add_flag(flag, *tmp, desc);
    ap.fns.push_back([opt, tmp, &slot, value] {
        if (opt->count() && *tmp) slot = value;
    });
}

json read_config_section(const std::string& path, const std::string& section) {
    if (path.empty()) return json::object();
    json j = load_json_file(path);
    if (!j.is_object()) throw DataError("config file must hold a JSON object: " + path);
    if (!j.contains(section)) return json::object();
    return j.at(section);
}

void apply_env_seed(std::uint64_t& seed) {
    const char* s = std::getenv("TKGQA_SEED");
    if (!s || !*s) return;
    try {
        seed = std::stoull(s);
    } catch (const std::exception&) {
        throw UsageError(std::string("TKGQA_SEED is not a non-negative integer: ") + s);
    }
}

std::vector<QuestionInstance> load_question_file(const std::string& path, const KGStore& store) {
    QuestionLoadStats stats;
    std::vector<QuestionInstance> qs = load_questions(path, store, stats);
    for (const std::string& w : stats.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    std::printf("loaded %zu questions from %s (%zu skipped)\n", stats.loaded, path.c_str(),
                stats.skipped);
    return qs;
}

void write_text_file(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << body;
    if (!out) throw DataError("write failed: " + path);
}

void write_report_files(const EvalReport& rep, const std::string& dir, const std::string& stem) {
    std::filesystem::create_directories(dir);
    std::filesystem::path base = std::filesystem::path(dir) / stem;
    write_text_file(base.string() + ".md", rep.to_markdown());
    write_text_file(base.string() + ".json", rep.to_json().dump(2) + "\n");
    write_text_file(base.string() + ".svg", rep.to_svg());
    std::printf("wrote %s.{md,json,svg}\n", base.string().c_str());
}

void print_train_log(const TrainQaLog& log) {
    for (std::size_t e = 0; e < log.epoch_loss.size(); ++e)
        std::printf("epoch %zu  loss %.6f\n", e + 1, log.epoch_loss[e]);
    if (log.skipped) std::printf("skipped %zu instances without reachable golds\n", log.skipped);
    if (log.diverged)
        std::printf("training diverged; parameters restored to the last finite epoch\n");
}

// ----- generate ------------------------------------------------------------

struct GenerateArgs {
    std::string config_path, out_dir;
    FlagAppliers flags;
    SyntheticWorldConfig world;
};

void setup_generate(CLI::App& app, GenerateArgs& a) {
    CLI::App* cmd = app.add_subcommand("generate", "Generate a synthetic temporal QA dataset");
    cmd->add_option("--out", a.out_dir, "Output directory")->required();
    cmd->add_option("--config", a.config_path, "JSON config file (section \"world\")");
    bind_flag(cmd, "--entities", a.world.entities, a.flags, "Entity count");
    bind_flag(cmd, "--relations", a.world.relations, a.flags, "Relation count");
    bind_flag(cmd, "--year-begin", a.world.year_begin, a.flags, "First year");
    bind_flag(cmd, "--year-end", a.world.year_end, a.flags, "Last year");
    bind_flag(cmd, "--facts-per-entity", a.world.facts_per_entity, a.flags,
              "Membership stints per player");
    bind_flag(cmd, "--questions-per-category", a.world.questions_per_category, a.flags,
              "Question budget per category");
    bind_flag(cmd, "--seed", a.world.seed, a.flags, "World seed");
    cmd->callback([&a] {
        a.world = SyntheticWorldConfig::from_json(read_config_section(a.config_path, "world"));
        apply_env_seed(a.world.seed);
        a.flags.run();
        GeneratedDataset ds = generate_dataset(a.world);
        std::filesystem::create_directories(a.out_dir);
        ds.write(a.out_dir);
        json summary{{"config", a.world.to_json()},
                     {"facts", ds.facts.size()},
                     {"train", ds.train.size()},
                     {"dev", ds.dev.size()},
                     {"test", ds.test.size()},
                     {"skipped", ds.skipped}};
        save_json_atomic(summary, (std::filesystem::path(a.out_dir) / "dataset.json").string());
        std::printf("facts: %zu\nquestions: train %zu, dev %zu, test %zu\n", ds.facts.size(),
                    ds.train.size(), ds.dev.size(), ds.test.size());
        for (const auto& [cat, n] : ds.skipped)
            std::printf("skipped %zu unsatisfiable draws in %s\n", n, cat.c_str());
    });
}

// ----- train-kg ------------------------------------------------------------

struct TrainKgArgs {
    std::string config_path, facts_path, out_path;
    bool metrics = false;
    FlagAppliers flags;
    KgTrainConfig kg;
};

void setup_train_kg(CLI::App& app, TrainKgArgs& a) {
    CLI::App* cmd = app.add_subcommand("train-kg", "Train temporal KG embeddings");
    cmd->add_option("--facts", a.facts_path, "Fact TSV file")->required();
    cmd->add_option("--out", a.out_path, "Checkpoint output path")->required();
    cmd->add_option("--config", a.config_path, "JSON config file (section \"kg\")");
    cmd->add_flag("--metrics", a.metrics, "Also report filtered Hits@1 over all facts");
    bind_flag(cmd, "--dim", a.kg.dim, a.flags, "Complex dimension D");
    bind_flag(cmd, "--lambda", a.kg.lambda, a.flags, "Time-order auxiliary weight");
    bind_flag(cmd, "--epochs", a.kg.epochs, a.flags, "Training epochs");
    bind_flag(cmd, "--lr", a.kg.lr, a.flags, "Learning rate");
    bind_flag(cmd, "--batch-size", a.kg.batch_size, a.flags, "Edges per batch");
    bind_flag(cmd, "--reg-weight", a.kg.reg_weight, a.flags, "Cube-magnitude penalty weight");
    bind_flag(cmd, "--aux-pairs", a.kg.aux_pairs_per_batch, a.flags,
              "Timestamp pairs per batch for the order task");
    bind_flag(cmd, "--init-std", a.kg.init_std, a.flags, "Init scale");
    bind_flag(cmd, "--seed", a.kg.seed, a.flags, "Training seed");
    cmd->callback([&a] {
        a.kg = KgTrainConfig::from_json(read_config_section(a.config_path, "kg"));
        apply_env_seed(a.kg.seed);
        a.flags.run();
        KGStore store = KGStore::load_facts(a.facts_path);
        std::printf("facts: %zu, entities: %zu, timestamps: %zu\n", store.facts().size(),
                    store.entity_count(), store.timestamp_count());
        KgTrainLog log;
        KgEmbeddings emb = train_kg(store, a.kg, &log);
        if (!log.epoch_loss.empty())
            std::printf("final loss %.6f over %zu epochs\n", log.epoch_loss.back(),
                        log.epoch_loss.size());
        std::printf("timestamp order accuracy: %.4f\n", pairwise_order_accuracy(emb));
        if (a.metrics) std::printf("filtered Hits@1: %.4f\n", filtered_hits_at_1(store, emb));
        save_kg_checkpoint(emb, a.kg, a.out_path);
        std::printf("wrote %s\n", a.out_path.c_str());
    });
}

// ----- shared QA option block ----------------------------------------------

struct QaArgs {
    std::string config_path, facts_path, train_path, dev_path, kg_ckpt_path;
    FlagAppliers flags;
    QaConfig qa;
    KgTrainConfig kg;
};

void add_qa_options(CLI::App* cmd, QaArgs& a, bool with_train_paths) {
    cmd->add_option("--facts", a.facts_path, "Fact TSV file")->required();
    if (with_train_paths) {
        cmd->add_option("--train", a.train_path, "Training question JSONL")->required();
        cmd->add_option("--dev", a.dev_path, "Optional dev question JSONL for a report");
    }
    cmd->add_option("--config", a.config_path, "JSON config file (sections \"qa\", \"kg\")");
    bind_flag(cmd, "--d-model", a.qa.d_model, a.flags, "Text/GNN hidden width");
    bind_flag(cmd, "--encoder-layers", a.qa.encoder_layers, a.flags, "Encoder layers");
    bind_flag(cmd, "--fusion-layers", a.qa.fusion_layers, a.flags, "Fusion layers");
    bind_flag(cmd, "--gnn-layers", a.qa.gnn_layers, a.flags, "Message-passing layers");
    bind_flag(cmd, "--hops", a.qa.hops, a.flags, "Diffusion hop cap per layer");
    bind_flag(cmd, "--subgraph-hops", a.qa.subgraph_hops, a.flags, "Subgraph radius");
    bind_flag(cmd, "--retrieve-k", a.qa.retrieve_k, a.flags, "Facts kept by retrieval");
    bind_flag(cmd, "--epochs", a.qa.epochs, a.flags, "Training epochs");
    bind_flag(cmd, "--batch-size", a.qa.batch_size, a.flags, "Questions per batch");
    bind_flag(cmd, "--lr", a.qa.lr, a.flags, "Learning rate");
    bind_flag(cmd, "--init-std", a.qa.init_std, a.flags, "Init scale");
    bind_flag(cmd, "--seed", a.qa.seed, a.flags, "Training seed");
    bind_toggle(cmd, "--no-calibration", a.qa.use_calibration, false, a.flags,
                "Disable question calibration against retrieved facts");
    bind_toggle(cmd, "--unfreeze-kg", a.qa.unfreeze_kg, true, a.flags,
                "Fine-tune KG tables during QA training");
    // Inline KG training knobs, used when --kg is absent.
    bind_flag(cmd, "--kg-dim", a.kg.dim, a.flags, "Inline KG training: complex dimension");
    bind_flag(cmd, "--kg-lambda", a.kg.lambda, a.flags, "Inline KG training: time-order weight");
    bind_flag(cmd, "--kg-epochs", a.kg.epochs, a.flags, "Inline KG training: epochs");
    bind_flag(cmd, "--kg-lr", a.kg.lr, a.flags, "Inline KG training: learning rate");
    bind_flag(cmd, "--kg-seed", a.kg.seed, a.flags, "Inline KG training: seed");
}

void load_qa_configs(QaArgs& a) {
    a.qa = QaConfig::from_json(read_config_section(a.config_path, "qa"));
    a.kg = KgTrainConfig::from_json(read_config_section(a.config_path, "kg"));
    apply_env_seed(a.qa.seed);
    a.flags.run();
}

KgEmbeddings obtain_embeddings(const QaArgs& a, const KGStore& store) {
    if (!a.kg_ckpt_path.empty()) {
        KgEmbeddings emb = load_kg_checkpoint_file(a.kg_ckpt_path);
        validate_kg_checkpoint(emb, store);
        std::printf("loaded KG checkpoint %s\n", a.kg_ckpt_path.c_str());
        return emb;
    }
    std::printf("training KG embeddings inline (dim %zu, lambda %.3f, %zu epochs)\n", a.kg.dim,
                a.kg.lambda, a.kg.epochs);
    return train_kg(store, a.kg);
}

// ----- train-qa ------------------------------------------------------------

struct TrainQaArgs : QaArgs {
    std::string out_path, log_path;
};

void setup_train_qa(CLI::App& app, TrainQaArgs& a) {
    CLI::App* cmd = app.add_subcommand("train-qa", "Train the question answering pipeline");
    add_qa_options(cmd, a, true);
    cmd->add_option("--kg", a.kg_ckpt_path, "KG embedding checkpoint (else trained inline)");
    cmd->add_option("--out", a.out_path, "Pipeline checkpoint output path")->required();
    cmd->add_option("--log", a.log_path, "Optional JSON training-log output path");
    cmd->callback([&a] {
        load_qa_configs(a);
        KGStore store = KGStore::load_facts(a.facts_path);
        std::vector<QuestionInstance> train_qs = load_question_file(a.train_path, store);
        KgEmbeddings emb = obtain_embeddings(a, store);
        QaPipeline pipe(store, std::move(emb),
                        QaPipeline::build_vocabulary(store, train_qs), a.qa);
        TrainQaLog log = pipe.train(train_qs);
        print_train_log(log);
        if (!a.log_path.empty())
            save_json_atomic(json{{"config", a.qa.to_json()}, {"log", log.to_json()}},
                             a.log_path);
        save_qa_checkpoint(pipe, a.out_path);
        std::printf("wrote %s\n", a.out_path.c_str());
        if (!a.dev_path.empty()) {
            std::vector<QuestionInstance> dev_qs = load_question_file(a.dev_path, store);
            EvalReport rep =
                evaluate([&](const QuestionInstance& q) { return pipe.predict(q); }, dev_qs);
            std::printf("%s", rep.to_markdown().c_str());
        }
    });
}

// ----- eval ----------------------------------------------------------------

struct EvalArgs {
    std::string facts_path, questions_path, ckpt_path, report_dir;
    std::size_t threads = 1;
};

void setup_eval(CLI::App& app, EvalArgs& a) {
    CLI::App* cmd = app.add_subcommand("eval", "Evaluate a pipeline checkpoint");
    cmd->add_option("--facts", a.facts_path, "Fact TSV file")->required();
    cmd->add_option("--questions", a.questions_path, "Question JSONL file")->required();
    cmd->add_option("--checkpoint", a.ckpt_path, "Pipeline checkpoint")->required();
    cmd->add_option("--report-dir", a.report_dir, "Write report.{md,json,svg} here");
    cmd->add_option("--threads", a.threads, "Worker threads for scoring");
    cmd->callback([&a] {
        KGStore store = KGStore::load_facts(a.facts_path);
        std::vector<QuestionInstance> qs = load_question_file(a.questions_path, store);
        QaPipeline pipe = load_qa_checkpoint_file(store, a.ckpt_path);
        EvalReport rep = evaluate([&](const QuestionInstance& q) { return pipe.predict(q); }, qs,
                                  a.threads);
        std::printf("%s", rep.to_markdown().c_str());
        if (!a.report_dir.empty()) write_report_files(rep, a.report_dir, "report");
    });
}

// ----- explain -------------------------------------------------------------

struct ExplainArgs {
    std::string facts_path, questions_path, ckpt_path, out_path;
    std::size_t index = 0, limit = 1;
};

json explain_one(const KGStore& store, QaPipeline& pipe, const QuestionInstance& q) {
    QuestionContext ctx = pipe.prepare(q);
    ForwardResult fr;
    std::vector<double> proportions;
    bool calibrated = pipe.config().use_calibration;
    if (calibrated) {
        proportions = pipe.attribute_spo(q, ctx, &fr);
    } else {
        fr = pipe.forward(q, ctx);
    }
    // Reasoning paths terminate at entity nodes; for a timestamp prediction
    // the path targets the strongest entity candidate instead.
    PathResult path;
    if (fr.dist.entity_candidates.empty()) {
        path.diagnostic = "subgraph has no entity candidates";
    } else {
        const Tensor& p = fr.dist.probabilities->value;
        std::size_t best = 0;
        for (std::size_t i = 1; i < fr.dist.entity_candidates.size(); ++i)
            if (p(i) > p(best)) best = i;
        path = extract_path(store, ctx.sg, ctx.layout, fr.gnn.trace, q.entities,
                            fr.dist.entity_candidates[best]);
    }
    json rec = prediction_record(store, q, fr.dist, path_json(store, path));
    if (calibrated) rec["attribution"] = attribution_json(store, fr.retrieved, proportions);
    return rec;
}

void setup_explain(CLI::App& app, ExplainArgs& a) {
    CLI::App* cmd =
        app.add_subcommand("explain", "Emit reasoning-path and attribution reports");
    cmd->add_option("--facts", a.facts_path, "Fact TSV file")->required();
    cmd->add_option("--questions", a.questions_path, "Question JSONL file")->required();
    cmd->add_option("--checkpoint", a.ckpt_path, "Pipeline checkpoint")->required();
    cmd->add_option("--index", a.index, "First question index to explain");
    cmd->add_option("--limit", a.limit, "Number of questions to explain");
    cmd->add_option("--out", a.out_path, "Write the JSON records here instead of stdout");
    cmd->callback([&a] {
        KGStore store = KGStore::load_facts(a.facts_path);
        std::vector<QuestionInstance> qs = load_question_file(a.questions_path, store);
        if (a.index >= qs.size())
            throw UsageError("--index " + std::to_string(a.index) + " out of range: file has " +
                             std::to_string(qs.size()) + " questions");
        QaPipeline pipe = load_qa_checkpoint_file(store, a.ckpt_path);
        json records = json::array();
        std::size_t end = std::min(qs.size(), a.index + std::max<std::size_t>(a.limit, 1));
        for (std::size_t i = a.index; i < end; ++i)
            records.push_back(explain_one(store, pipe, qs[i]));
        if (a.out_path.empty())
            std::printf("%s\n", records.dump(2).c_str());
        else {
            save_json_atomic(records, a.out_path);
            std::printf("wrote %s\n", a.out_path.c_str());
        }
    });
}

// ----- ablate ---------------------------------------------------------------

struct AblateArgs : QaArgs {
    std::string test_path, report_dir;
};

struct AblationRow {
    std::string name;
    EvalReport report;
};

std::string ablation_markdown(const std::vector<AblationRow>& rows) {
    std::string md = "| variant | Hits@1 overall | Hits@1 simple | Hits@1 complex |\n";
    md += "|---|---|---|---|\n";
    char buf[160];
    for (const AblationRow& r : rows) {
        std::snprintf(buf, sizeof buf, "| %s | %.6f | %.6f | %.6f |\n", r.name.c_str(),
                      r.report.overall.hits1(), r.report.simple.hits1(),
                      r.report.complex_.hits1());
        md += buf;
    }
    return md;
}

std::string ablation_svg(const std::vector<AblationRow>& rows) {
    std::size_t w = 140 * rows.size() + 60, h = 260;
    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
                      "\" height=\"" + std::to_string(h) + "\">\n";
    char buf[256];
    for (std::size_t i = 0; i < rows.size(); ++i) {
        double v = rows[i].report.overall.hits1();
        std::size_t bar = static_cast<std::size_t>(v * 180.0);
        std::size_t x = 40 + 140 * i;
        std::snprintf(buf, sizeof buf,
                      "<rect x=\"%zu\" y=\"%zu\" width=\"100\" height=\"%zu\" fill=\"#4477aa\"/>\n"
                      "<text x=\"%zu\" y=\"225\" font-size=\"12\">%s</text>\n"
                      "<text x=\"%zu\" y=\"%zu\" font-size=\"12\">%.4f</text>\n",
                      x, 200 - bar, bar, x, rows[i].name.c_str(), x, 195 - bar, v);
        svg += buf;
    }
    svg += "</svg>\n";
    return svg;
}

void setup_ablate(CLI::App& app, AblateArgs& a) {
    CLI::App* cmd = app.add_subcommand(
        "ablate", "Train and compare the full pipeline against three reduced variants");
    add_qa_options(cmd, a, true);
    cmd->add_option("--test", a.test_path, "Held-out question JSONL")->required();
    cmd->add_option("--report-dir", a.report_dir, "Write ablation.{md,json,svg} here");
    cmd->callback([&a] {
        load_qa_configs(a);
        KGStore store = KGStore::load_facts(a.facts_path);
        std::vector<QuestionInstance> train_qs = load_question_file(a.train_path, store);
        std::vector<QuestionInstance> test_qs = load_question_file(a.test_path, store);
        Tokenizer vocab = QaPipeline::build_vocabulary(store, train_qs);

        KgTrainConfig kg_plain = a.kg;
        kg_plain.lambda = 0.0;
        std::printf("training KG embeddings with and without the time-order task\n");
        KgEmbeddings kg_full = train_kg(store, a.kg);
        KgEmbeddings kg_no_order = train_kg(store, kg_plain);

        QaConfig no_hop = a.qa;
        no_hop.hops = 0;
        QaConfig no_cal = a.qa;
        no_cal.use_calibration = false;

        struct Variant {
            const char* name;
            const KgEmbeddings* emb;
            const QaConfig* cfg;
        };
        std::vector<Variant> variants{{"full", &kg_full, &a.qa},
                                      {"no_time_order", &kg_no_order, &a.qa},
                                      {"no_multihop", &kg_full, &no_hop},
                                      {"no_calibration", &kg_full, &no_cal}};
        std::vector<AblationRow> rows;
        for (const Variant& v : variants) {
            std::printf("== %s ==\n", v.name);
            // Deep copy: KgEmbeddings copies share parameter nodes, and a
            // variant trained with --unfreeze-kg must not bleed into the next.
            KgEmbeddings emb = load_kg_checkpoint(kg_checkpoint_json(*v.emb, a.kg));
            QaPipeline pipe(store, std::move(emb), vocab, *v.cfg);
            TrainQaLog log = pipe.train(train_qs);
            print_train_log(log);
            rows.push_back(
                {v.name,
                 evaluate([&](const QuestionInstance& q) { return pipe.predict(q); }, test_qs)});
        }
        std::string md = ablation_markdown(rows);
        std::printf("%s", md.c_str());
        if (!a.report_dir.empty()) {
            std::filesystem::create_directories(a.report_dir);
            std::filesystem::path base = std::filesystem::path(a.report_dir) / "ablation";
            write_text_file(base.string() + ".md", md);
            json j = json::array();
            for (const AblationRow& r : rows)
                j.push_back(json{{"variant", r.name}, {"report", r.report.to_json()}});
            write_text_file(base.string() + ".json", j.dump(2) + "\n");
            write_text_file(base.string() + ".svg", ablation_svg(rows));
            std::printf("wrote %s.{md,json,svg}\n", base.string().c_str());
        }
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Temporal knowledge graph question answering toolkit"};
    app.require_subcommand(1);

    GenerateArgs gen;
    TrainKgArgs tkg;
    TrainQaArgs tqa;
    EvalArgs ev;
    ExplainArgs ex;
    AblateArgs ab;
    setup_generate(app, gen);
    setup_train_kg(app, tkg);
    setup_train_qa(app, tqa);
    setup_eval(app, ev);
    setup_explain(app, ex);
    setup_ablate(app, ab);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const json::exception& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    }
    return 0;
}
