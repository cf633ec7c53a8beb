#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tkgqa/errors.hpp"
#include "tkgqa/kg.hpp"
#include "tkgqa/rng.hpp"
#include "tkgqa/serialize.hpp"

namespace tkgqa {

// Knobs for the synthetic world. Entities split into players, teams, and
// awards; players hold non-overlapping membership stints and win single-year
// awards, so every temporal question template below has a scan-computable
// gold answer.
struct SyntheticWorldConfig {
    std::size_t entities = 60;
    std::size_t relations = 2;  // membership relations plus the award relation
    std::int64_t year_begin = 2000;
    std::int64_t year_end = 2019;
    std::size_t facts_per_entity = 3;  // stints per player
    std::size_t questions_per_category = 50;
    std::uint64_t seed = 13;

    void validate() const {
        if (entities < 5) throw UsageError("config: need at least 5 entities");
        if (relations < 2) throw UsageError("config: need at least 2 relations");
        if (year_end < year_begin) throw UsageError("config: empty year range");
        if (facts_per_entity == 0) throw UsageError("config: facts_per_entity must be positive");
        if (questions_per_category == 0)
            throw UsageError("config: questions_per_category must be positive");
    }

    json to_json() const {
        return json{{"entities", entities},
                    {"relations", relations},
                    {"year_begin", year_begin},
                    {"year_end", year_end},
                    {"facts_per_entity", facts_per_entity},
                    {"questions_per_category", questions_per_category},
                    {"seed", seed}};
    }

    static SyntheticWorldConfig from_json(const json& j) {
        SyntheticWorldConfig c;
        if (j.contains("entities")) c.entities = j.at("entities").get<std::size_t>();
        if (j.contains("relations")) c.relations = j.at("relations").get<std::size_t>();
        if (j.contains("year_begin")) c.year_begin = j.at("year_begin").get<std::int64_t>();
        if (j.contains("year_end")) c.year_end = j.at("year_end").get<std::int64_t>();
        if (j.contains("facts_per_entity"))
            c.facts_per_entity = j.at("facts_per_entity").get<std::size_t>();
        if (j.contains("questions_per_category"))
            c.questions_per_category = j.at("questions_per_category").get<std::size_t>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

struct GeneratedDataset {
    std::vector<std::array<std::string, 5>> facts;
    std::vector<json> train, dev, test;
    std::map<std::string, std::size_t> skipped;  // per category, bounded-retry give-ups

    void write(const std::string& dir) const {
        auto fact_path = dir + "/facts.tsv";
        std::ofstream out(fact_path, std::ios::binary);
        if (!out) throw DataError("cannot write fact file: " + fact_path);
        for (const auto& f : facts)
            out << f[0] << '\t' << f[1] << '\t' << f[2] << '\t' << f[3] << '\t' << f[4] << '\n';
        out.close();
        auto write_split = [&](const char* name, const std::vector<json>& qs) {
            std::string path = dir + "/" + name + ".jsonl";
            std::ofstream q(path, std::ios::binary);
            if (!q) throw DataError("cannot write question file: " + path);
            for (const json& j : qs) q << j.dump() << '\n';
        };
        write_split("train", train);
        write_split("dev", dev);
        write_split("test", test);
    }
};

namespace detail {

// The generator's view of one interval fact.
struct GenFact {
    std::string s, rel, o;
    std::int64_t b = 0, e = 0;
};

inline const std::vector<std::string>& membership_palette() {
    static const std::vector<std::string> kNames{"plays_for", "coaches", "captains",
                                                 "manages",   "scouts",  "sponsors"};
    return kNames;
}

}  // namespace detail

// Deterministic-for-seed world plus five question categories. Golds come
// from exhaustive scans over the generated facts, and every emitted question
// is checked to keep its golds inside the 2-hop candidate set around its
// annotated entities, which is what the answering pipeline will see.
inline GeneratedDataset generate_dataset(const SyntheticWorldConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);

    std::size_t players_n = std::max<std::size_t>(2, cfg.entities * 6 / 10);
    std::size_t teams_n = std::max<std::size_t>(2, cfg.entities * 3 / 10);
    std::size_t awards_n = std::max<std::size_t>(1, cfg.entities - players_n - teams_n);
    std::vector<std::string> players, teams, awards;
    for (std::size_t i = 0; i < players_n; ++i) players.push_back("p" + std::to_string(i));
    for (std::size_t i = 0; i < teams_n; ++i) teams.push_back("t" + std::to_string(i));
    for (std::size_t i = 0; i < awards_n; ++i) awards.push_back("award" + std::to_string(i));

    std::size_t memberships = std::min(cfg.relations - 1, detail::membership_palette().size());
    std::vector<std::string> rels(detail::membership_palette().begin(),
                                  detail::membership_palette().begin() + memberships);

    // Non-overlapping stints per player, chronological by construction.
    std::vector<detail::GenFact> stints, wins;
    for (const std::string& p : players) {
        std::int64_t cursor = cfg.year_begin + rng.uniform_int(0, 2);
        std::string prev_team;
        for (std::size_t k = 0; k < cfg.facts_per_entity; ++k) {
            if (cursor > cfg.year_end) break;
            std::string team = teams[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(teams.size()) - 1))];
            if (team == prev_team) team = teams[(std::find(teams.begin(), teams.end(), team) -
                                                 teams.begin() + 1) %
                                                teams.size()];
            std::int64_t len = rng.uniform_int(1, 3);
            std::int64_t end = std::min(cfg.year_end, cursor + len - 1);
            const std::string& rel = rels[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(rels.size()) - 1))];
            stints.push_back({p, rel, team, cursor, end});
            prev_team = team;
            cursor = end + 1 + rng.uniform_int(1, 2);
        }
    }
    // One winner per (award, year) on roughly 40% of years.
    for (const std::string& a : awards) {
        for (std::int64_t y = cfg.year_begin; y <= cfg.year_end; ++y) {
            if (rng.uniform() >= 0.4) continue;
            const std::string& p = players[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(players.size()) - 1))];
            wins.push_back({p, "won", a, y, y});
        }
    }
    if (stints.empty() || wins.empty())
        throw DataError("generated world is degenerate; enlarge the year range or counts");

    GeneratedDataset out;
    for (const auto& f : stints)
        out.facts.push_back({f.s, f.rel, f.o, std::to_string(f.b), std::to_string(f.e)});
    for (const auto& f : wins)
        out.facts.push_back({f.s, f.rel, f.o, std::to_string(f.b), std::to_string(f.e)});

    KGStore store = KGStore::ingest(out.facts);

    // ---- exhaustive-scan gold oracles ----
    auto stints_of = [&](const std::string& p, const std::string& rel) {
        std::vector<detail::GenFact> v;
        for (const auto& f : stints)
            if (f.s == p && f.rel == rel) v.push_back(f);
        return v;
    };
    auto members_at = [&](const std::string& team, const std::string& rel, std::int64_t y) {
        std::set<std::string> v;
        for (const auto& f : stints)
            if (f.o == team && f.rel == rel && f.b <= y && y <= f.e) v.insert(f.s);
        return std::vector<std::string>(v.begin(), v.end());
    };
    auto winners_at = [&](const std::string& award, std::int64_t y) {
        std::set<std::string> v;
        for (const auto& f : wins)
            if (f.o == award && f.b == y) v.insert(f.s);
        return std::vector<std::string>(v.begin(), v.end());
    };

    auto pick_stint = [&]() -> const detail::GenFact& {
        return stints[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(stints.size()) - 1))];
    };
    auto pick_win = [&]() -> const detail::GenFact& {
        return wins[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(wins.size()) - 1))];
    };

    // Golds must sit inside the 2-hop neighborhood of the annotated entities;
    // the pipeline can only rank candidates it can reach.
    auto reachable = [&](const json& q) {
        std::vector<std::size_t> seeds;
        for (const auto& e : q.at("entities")) seeds.push_back(store.entity_id(e.get<std::string>()));
        QuerySubgraph sg = extract_subgraph(store, seeds, 2);
        for (const auto& a : q.at("answers")) {
            std::string name = a.get<std::string>();
            if (q.at("answer_type") == "entity") {
                if (!std::binary_search(sg.candidate_entities.begin(),
                                        sg.candidate_entities.end(), store.entity_id(name)))
                    return false;
            } else {
                std::size_t ts = store.timestamp_id(std::stoll(name));
                if (!std::binary_search(sg.candidate_timestamps.begin(),
                                        sg.candidate_timestamps.end(), ts))
                    return false;
            }
        }
        return true;
    };

    auto record = [&](std::string text, std::vector<std::string> entities,
                      std::vector<std::string> timestamps, std::vector<std::string> answers,
                      const char* answer_type, const char* category) {
        return json{{"text", std::move(text)},
                    {"entities", std::move(entities)},
                    {"timestamps", std::move(timestamps)},
                    {"answers", std::move(answers)},
                    {"answer_type", answer_type},
                    {"category", category}};
    };

    auto years_of = [](const std::vector<detail::GenFact>& fs) {
        std::set<std::int64_t> ys;
        for (const auto& f : fs)
            for (std::int64_t y = f.b; y <= f.e; ++y) ys.insert(y);
        std::vector<std::string> out;
        for (std::int64_t y : ys) out.push_back(std::to_string(y));
        return out;
    };

    // One sampling attempt per category; empty json means the draw was
    // unsatisfiable and the caller retries.
    auto sample = [&](Category cat) -> json {
        switch (cat) {
            case Category::simple_entity: {
                if (rng.uniform() < 0.7) {
                    const auto& f = pick_stint();
                    std::int64_t y = rng.uniform_int(f.b, f.e);
                    return record("who " + f.rel + " " + f.o + " in " + std::to_string(y),
                                  {f.o}, {std::to_string(y)}, members_at(f.o, f.rel, y),
                                  "entity", "simple_entity");
                }
                const auto& w = pick_win();
                return record("who won " + w.o + " in " + std::to_string(w.b), {w.o},
                              {std::to_string(w.b)}, winners_at(w.o, w.b), "entity",
                              "simple_entity");
            }
            case Category::simple_time: {
                if (rng.uniform() < 0.7) {
                    const auto& f = pick_stint();
                    std::vector<detail::GenFact> same;
                    for (const auto& g : stints)
                        if (g.s == f.s && g.rel == f.rel && g.o == f.o) same.push_back(g);
                    return record("when did " + f.s + " " + f.rel + " " + f.o, {f.s, f.o}, {},
                                  years_of(same), "time", "simple_time");
                }
                const auto& w = pick_win();
                std::vector<detail::GenFact> same;
                for (const auto& g : wins)
                    if (g.s == w.s && g.o == w.o) same.push_back(g);
                return record("when did " + w.s + " win " + w.o, {w.s, w.o}, {},
                              years_of(same), "time", "simple_time");
            }
            case Category::before_after: {
                const auto& f = pick_stint();
                bool before = rng.uniform() < 0.5;
                std::vector<detail::GenFact> mine = stints_of(f.s, f.rel);
                // Reference span: the player's stints with this team.
                std::int64_t ref_b = f.b, ref_e = f.e;
                for (const auto& g : mine)
                    if (g.o == f.o) {
                        ref_b = std::min(ref_b, g.b);
                        ref_e = std::max(ref_e, g.e);
                    }
                std::int64_t best = 0;
                bool found = false;
                for (const auto& g : mine) {
                    if (g.o == f.o) continue;
                    if (before && g.e < ref_b && (!found || g.e > best)) best = g.e, found = true;
                    if (!before && g.b > ref_e && (!found || g.b < best)) best = g.b, found = true;
                }
                if (!found) return json();
                std::set<std::string> golds;
                for (const auto& g : mine)
                    if (g.o != f.o && ((before && g.e == best) || (!before && g.b == best)))
                        golds.insert(g.o);
                return record("which team did " + f.s + " " + f.rel + " " +
                                  (before ? "before " : "after ") + f.o,
                              {f.s, f.o}, {},
                              std::vector<std::string>(golds.begin(), golds.end()), "entity",
                              "before_after");
            }
            case Category::first_last: {
                bool first = rng.uniform() < 0.5;
                if (rng.uniform() < 0.6) {
                    const auto& f = pick_stint();
                    std::vector<detail::GenFact> mine = stints_of(f.s, f.rel);
                    if (mine.size() < 2) return json();
                    std::int64_t best = first ? mine.front().b : mine.front().e;
                    for (const auto& g : mine)
                        best = first ? std::min(best, g.b) : std::max(best, g.e);
                    std::set<std::string> golds;
                    for (const auto& g : mine)
                        if ((first && g.b == best) || (!first && g.e == best)) golds.insert(g.o);
                    return record("which team did " + f.s + " " + f.rel + " " +
                                      (first ? "first" : "last"),
                                  {f.s}, {},
                                  std::vector<std::string>(golds.begin(), golds.end()),
                                  "entity", "first_last");
                }
                const auto& w = pick_win();
                std::int64_t best = w.b;
                bool found = false;
                for (const auto& g : wins)
                    if (g.o == w.o) {
                        if (!found)
                            best = g.b, found = true;
                        else
                            best = first ? std::min(best, g.b) : std::max(best, g.b);
                    }
                return record("who won " + w.o + " " + (first ? "first" : "last"), {w.o}, {},
                              winners_at(w.o, best), "entity", "first_last");
            }
            case Category::time_join: {
                const auto& w = pick_win();
                if (rng.uniform() < 0.5) {
                    // Teammates-of-the-winner at the award year.
                    const std::string& rel = rels[static_cast<std::size_t>(
                        rng.uniform_int(0, static_cast<std::int64_t>(rels.size()) - 1))];
                    const std::string& team = teams[static_cast<std::size_t>(
                        rng.uniform_int(0, static_cast<std::int64_t>(teams.size()) - 1))];
                    std::vector<std::string> golds = members_at(team, rel, w.b);
                    if (golds.empty()) return json();
                    return record("who " + rel + " " + team + " when " + w.s + " won " + w.o,
                                  {team, w.s}, {}, golds, "entity", "time_join");
                }
                // The winner's own team at the award year.
                const std::string& rel = rels[static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(rels.size()) - 1))];
                std::set<std::string> golds;
                for (const auto& g : stints)
                    if (g.s == w.s && g.rel == rel && g.b <= w.b && w.b <= g.e) golds.insert(g.o);
                if (golds.empty()) return json();
                return record("which team did " + w.s + " " + rel + " when they won " + w.o,
                              {w.s, w.o}, {},
                              std::vector<std::string>(golds.begin(), golds.end()), "entity",
                              "time_join");
            }
        }
        return json();
    };

    constexpr std::size_t kMaxAttempts = 60;
    constexpr std::size_t kUniqueAttempts = 20;
    std::set<std::string> seen;
    std::vector<std::vector<json>> per_category;
    for (Category cat : {Category::simple_entity, Category::simple_time,
                         Category::before_after, Category::first_last, Category::time_join}) {
        std::vector<json> qs;
        for (std::size_t i = 0; i < cfg.questions_per_category; ++i) {
            json q;
            for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
                json cand = sample(cat);
                if (cand.is_null() || cand.at("answers").empty()) continue;
                if (!reachable(cand)) continue;
                // Prefer unseen texts; accept repeats once the template
                // space is exhausted rather than starving the split.
                if (attempt < kUniqueAttempts && seen.count(cand.at("text").get<std::string>()))
                    continue;
                q = std::move(cand);
                break;
            }
            if (q.is_null()) {
                ++out.skipped[category_name(cat)];
                continue;
            }
            seen.insert(q.at("text").get<std::string>());
            qs.push_back(std::move(q));
        }
        per_category.push_back(std::move(qs));
    }

    // 70/15/15 split per category, then a shuffled train order.
    for (auto& qs : per_category) {
        std::size_t n = qs.size();
        std::size_t dev_n = n * 15 / 100, test_n = n * 15 / 100;
        std::size_t train_n = n - dev_n - test_n;
        for (std::size_t i = 0; i < n; ++i) {
            if (i < train_n)
                out.train.push_back(std::move(qs[i]));
            else if (i < train_n + dev_n)
                out.dev.push_back(std::move(qs[i]));
            else
                out.test.push_back(std::move(qs[i]));
        }
    }
    rng.shuffle(out.train);
    return out;
}

}  // namespace tkgqa
