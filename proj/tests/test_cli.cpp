#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <catch2/catch_amalgamated.hpp>
#include <json.hpp>

#ifndef TKGQA_CLI_PATH
#error "TKGQA_CLI_PATH must point at the command-line binary"
#endif

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

int run_cli(const std::string& args, const std::string& log = "/dev/null") {
    std::string cmd = std::string(TKGQA_CLI_PATH) + " " + args + " >" + log + " 2>&1";
    int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// One workspace shared by the whole suite: generate once, train once, then
// exercise eval/explain against the same artifacts.
struct Workspace {
    fs::path dir;

    Workspace() : dir(fs::temp_directory_path() / "tkgqa_cli_suite") {
        fs::remove_all(dir);
        fs::create_directories(dir);
        REQUIRE(run_cli("generate --out " + (dir / "data").string() +
                        " --entities 30 --questions-per-category 15 --seed 9") == 0);
        REQUIRE(run_cli("train-kg --facts " + facts() + " --out " + (dir / "kg.json").string() +
                        " --dim 12 --epochs 40 --seed 2") == 0);
        REQUIRE(run_cli("train-qa --facts " + facts() + " --train " +
                        (dir / "data/train.jsonl").string() + " --kg " +
                        (dir / "kg.json").string() + " --out " + ckpt() +
                        " --d-model 24 --epochs 4 --seed 3 --log " +
                        (dir / "trainlog.json").string()) == 0);
    }

    std::string facts() const { return (dir / "data/facts.tsv").string(); }
    std::string test_questions() const { return (dir / "data/test.jsonl").string(); }
    std::string ckpt() const { return (dir / "qa.json").string(); }
};

Workspace& workspace() {
    static Workspace ws;
    return ws;
}

}  // namespace

TEST_CASE("generate is deterministic across processes") {
    Workspace& ws = workspace();
    fs::path again = ws.dir / "data_again";
    REQUIRE(run_cli("generate --out " + again.string() +
                    " --entities 30 --questions-per-category 15 --seed 9") == 0);
    for (const char* name : {"facts.tsv", "train.jsonl", "dev.jsonl", "test.jsonl"}) {
        INFO(name);
        REQUIRE(slurp(ws.dir / "data" / name) == slurp(again / name));
    }
}

TEST_CASE("training artifacts exist and parse") {
    Workspace& ws = workspace();
    json kg = json::parse(slurp(ws.dir / "kg.json"));
    REQUIRE(kg.at("kind") == "kg_embeddings");
    json qa = json::parse(slurp(ws.dir / "qa.json"));
    REQUIRE(qa.at("kind") == "qa_pipeline");
    json log = json::parse(slurp(ws.dir / "trainlog.json"));
    REQUIRE(log.at("log").at("epoch_loss").size() == 4);
    REQUIRE_FALSE(log.at("log").at("diverged").get<bool>());
}

TEST_CASE("eval emits identical reports across runs and thread counts") {
    Workspace& ws = workspace();
    std::string base = "eval --facts " + ws.facts() + " --questions " + ws.test_questions() +
                       " --checkpoint " + ws.ckpt();
    REQUIRE(run_cli(base + " --report-dir " + (ws.dir / "rep1").string()) == 0);
    REQUIRE(run_cli(base + " --report-dir " + (ws.dir / "rep2").string()) == 0);
    REQUIRE(run_cli(base + " --threads 4 --report-dir " + (ws.dir / "rep4").string()) == 0);
    for (const char* name : {"report.md", "report.json", "report.svg"}) {
        INFO(name);
        std::string first = slurp(ws.dir / "rep1" / name);
        REQUIRE(first == slurp(ws.dir / "rep2" / name));
        REQUIRE(first == slurp(ws.dir / "rep4" / name));
    }
    json rep = json::parse(slurp(ws.dir / "rep1/report.json"));
    double h1 = rep.at("overall").at("hits_at_1").get<double>();
    REQUIRE(h1 >= 0.0);
    REQUIRE(h1 <= 1.0);
    std::size_t total = rep.at("overall").at("total").get<std::size_t>();
    std::size_t by_cat = 0;
    for (const auto& [name, cell] : rep.at("by_category").items())
        by_cat += cell.at("total").get<std::size_t>();
    REQUIRE(by_cat == total);
}

TEST_CASE("explain emits paths and normalized attributions") {
    Workspace& ws = workspace();
    fs::path out = ws.dir / "explain.json";
    REQUIRE(run_cli("explain --facts " + ws.facts() + " --questions " + ws.test_questions() +
                    " --checkpoint " + ws.ckpt() + " --index 0 --limit 3 --out " +
                    out.string()) == 0);
    json records = json::parse(slurp(out));
    REQUIRE(records.size() == 3);
    for (const json& rec : records) {
        REQUIRE(rec.contains("path"));
        REQUIRE(rec.contains("top"));
        REQUIRE(rec.at("gold").size() >= 1);
        double sum = 0.0;
        for (const json& a : rec.at("attribution")) {
            double p = a.at("proportion").get<double>();
            REQUIRE(p >= 0.0);
            sum += p;
        }
        REQUIRE(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("seed environment variable overrides the config file") {
    Workspace& ws = workspace();
    fs::path cfg = ws.dir / "cfg.json";
    std::ofstream(cfg) << R"({"world": {"entities": 25, "questions_per_category": 5,)"
                       << R"( "seed": 111}})";
    std::string cmd = "TKGQA_SEED=222 " + std::string(TKGQA_CLI_PATH) + " generate --out " +
                      (ws.dir / "envgen").string() + " --config " + cfg.string() +
                      " >/dev/null 2>&1";
    REQUIRE(std::system(cmd.c_str()) == 0);
    json summary = json::parse(slurp(ws.dir / "envgen/dataset.json"));
    REQUIRE(summary.at("config").at("seed").get<std::uint64_t>() == 222);
    REQUIRE(summary.at("config").at("entities").get<std::size_t>() == 25);
}

TEST_CASE("failures map to the documented exit codes") {
    Workspace& ws = workspace();
    REQUIRE(run_cli("--help") == 0);
    REQUIRE(run_cli("bogus") == 1);
    REQUIRE(run_cli("eval --facts " + ws.facts()) == 1);  // missing required flags
    REQUIRE(run_cli("eval --facts /nonexistent.tsv --questions " + ws.test_questions() +
                    " --checkpoint " + ws.ckpt()) == 2);
    REQUIRE(run_cli("explain --facts " + ws.facts() + " --questions " + ws.test_questions() +
                    " --checkpoint " + ws.ckpt() + " --index 99999") == 1);
    // A KG checkpoint is not a pipeline checkpoint.
    REQUIRE(run_cli("eval --facts " + ws.facts() + " --questions " + ws.test_questions() +
                    " --checkpoint " + (ws.dir / "kg.json").string()) == 2);
    // Vocabulary mismatch: checkpoint trained on a different world.
    REQUIRE(run_cli("generate --out " + (ws.dir / "other").string() +
                    " --entities 12 --questions-per-category 2 --seed 1") == 0);
    REQUIRE(run_cli("eval --facts " + (ws.dir / "other/facts.tsv").string() + " --questions " +
                    ws.test_questions() + " --checkpoint " + ws.ckpt()) == 2);
}
