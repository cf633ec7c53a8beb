#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "tkgqa/errors.hpp"

namespace tkgqa {

// One source fact: subject held a relation to object over [t_begin, t_end].
// Ids index the store vocabularies; t_begin/t_end are timestamp ids.
struct Fact {
    std::size_t subject = 0;
    std::size_t relation = 0;
    std::size_t object = 0;
    std::size_t t_begin = 0;
    std::size_t t_end = 0;
};

// Expanded single-timestamp edge. rel >= relation_count() marks an inverse
// edge (object -> subject) with its own reversed-relation id.
struct Edge {
    std::size_t src = 0;
    std::size_t rel = 0;
    std::size_t dst = 0;
    std::size_t ts = 0;
    std::size_t fact = 0;  // index of the originating Fact
};

enum class AnswerType { entity, time };

enum class Category { simple_entity, simple_time, before_after, first_last, time_join };

inline const char* category_name(Category c) {
    switch (c) {
        case Category::simple_entity: return "simple_entity";
        case Category::simple_time: return "simple_time";
        case Category::before_after: return "before_after";
        case Category::first_last: return "first_last";
        case Category::time_join: return "time_join";
    }
    return "?";
}

inline Category category_from_name(const std::string& s) {
    for (Category c : {Category::simple_entity, Category::simple_time, Category::before_after,
                       Category::first_last, Category::time_join})
        if (s == category_name(c)) return c;
    throw DataError("unknown question category: " + s);
}

inline bool is_complex_category(Category c) {
    return c == Category::before_after || c == Category::first_last || c == Category::time_join;
}

struct QuestionInstance {
    std::string text;
    std::vector<std::size_t> tokens;  // filled by the text encoder's tokenizer
    std::vector<std::size_t> entities;
    std::vector<std::size_t> timestamps;
    std::vector<std::size_t> answers;  // entity ids or timestamp ids per answer_type
    AnswerType answer_type = AnswerType::entity;
    Category category = Category::simple_entity;
};

// Immutable after ingest. Vocabularies: entities and relations in order of
// first appearance; timestamps sorted by year with contiguous ids. Every
// fact contributes one edge per covered year (capped) plus inverse edges
// under relation id (rel + relation_count()).
class KGStore {
public:
    static constexpr std::size_t kDefaultExpansionCap = 100;

    static KGStore ingest(const std::vector<std::array<std::string, 5>>& records,
                          std::size_t per_fact_cap = kDefaultExpansionCap) {
        KGStore kg;
        kg.cap_ = per_fact_cap;
        struct RawFact {
            std::size_t s, r, o;
            std::int64_t begin, end;
        };
        std::vector<RawFact> raw;
        raw.reserve(records.size());
        std::set<std::int64_t> years;
        for (std::size_t line = 0; line < records.size(); ++line) {
            const auto& rec = records[line];
            auto fail = [&](const std::string& why) {
                throw DataError("fact line " + std::to_string(line + 1) + ": " + why);
            };
            for (const std::string& f : rec)
                if (f.empty()) fail("empty field");
            std::int64_t begin = parse_year(rec[3], fail);
            std::int64_t end = parse_year(rec[4], fail);
            if (begin > end) fail("interval begins after it ends");
            RawFact rf{kg.intern(kg.entity_ids_, kg.entity_names_, rec[0]),
                       kg.intern(kg.relation_ids_, kg.relation_names_, rec[1]),
                       kg.intern(kg.entity_ids_, kg.entity_names_, rec[2]), begin, end};
            raw.push_back(rf);
            // Interval endpoints always enter the vocabulary; interior years
            // only if the expansion cap lets their edge materialize.
            years.insert(begin);
            years.insert(end);
            std::int64_t last = last_expanded_year(begin, end, per_fact_cap);
            for (std::int64_t y = begin; y <= last; ++y) years.insert(y);
        }
        kg.years_.assign(years.begin(), years.end());  // set iterates ascending
        for (std::size_t i = 0; i < kg.years_.size(); ++i) kg.year_to_id_[kg.years_[i]] = i;

        for (const RawFact& rf : raw) {
            kg.facts_.push_back(Fact{rf.s, rf.r, rf.o, kg.year_to_id_.at(rf.begin),
                                     kg.year_to_id_.at(rf.end)});
        }
        std::size_t R = kg.relation_names_.size();
        for (std::size_t fi = 0; fi < raw.size(); ++fi) {
            const RawFact& rf = raw[fi];
            std::int64_t last = last_expanded_year(rf.begin, rf.end, per_fact_cap);
            if (last < rf.end) ++kg.truncated_facts_;
            for (std::int64_t y = rf.begin; y <= last; ++y) {
                std::size_t t = kg.year_to_id_.at(y);
                kg.edges_.push_back(Edge{rf.s, rf.r, rf.o, t, fi});
                kg.edges_.push_back(Edge{rf.o, rf.r + R, rf.s, t, fi});
            }
        }
        kg.adjacency_.assign(kg.entity_names_.size(), {});
        for (std::size_t ei = 0; ei < kg.edges_.size(); ++ei)
            kg.adjacency_[kg.edges_[ei].src].push_back(ei);
        return kg;
    }

    static KGStore load_facts(const std::string& path,
                              std::size_t per_fact_cap = kDefaultExpansionCap) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open fact file: " + path);
        std::vector<std::array<std::string, 5>> records;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::array<std::string, 5> rec;
            std::size_t field = 0, start = 0;
            for (std::size_t i = 0; i <= line.size(); ++i) {
                if (i == line.size() || line[i] == '\t') {
                    if (field >= 5)
                        throw DataError("fact line " + std::to_string(lineno) +
                                        ": more than 5 tab-separated fields");
                    rec[field++] = line.substr(start, i - start);
                    start = i + 1;
                }
            }
            if (field != 5)
                throw DataError("fact line " + std::to_string(lineno) + ": expected 5 fields, got " +
                                std::to_string(field));
            records.push_back(std::move(rec));
        }
        return ingest(records, per_fact_cap);
    }

    // ---- vocabulary access ----
    std::size_t entity_count() const { return entity_names_.size(); }
    std::size_t relation_count() const { return relation_names_.size(); }
    // Embedding tables must cover inverse relations too.
    std::size_t relation_count_with_inverse() const { return 2 * relation_names_.size(); }
    std::size_t timestamp_count() const { return years_.size(); }

    const std::string& entity_name(std::size_t id) const { return entity_names_.at(id); }
    std::string relation_name(std::size_t id) const {
        std::size_t R = relation_names_.size();
        return id < R ? relation_names_.at(id) : relation_names_.at(id - R) + "^-1";
    }
    std::int64_t timestamp_year(std::size_t id) const { return years_.at(id); }
    std::string timestamp_name(std::size_t id) const { return std::to_string(years_.at(id)); }

    bool has_entity(const std::string& name) const { return entity_ids_.count(name) != 0; }
    std::size_t entity_id(const std::string& name) const {
        auto it = entity_ids_.find(name);
        if (it == entity_ids_.end()) throw DataError("unknown entity: " + name);
        return it->second;
    }
    bool has_year(std::int64_t y) const { return year_to_id_.count(y) != 0; }
    std::size_t timestamp_id(std::int64_t y) const {
        auto it = year_to_id_.find(y);
        if (it == year_to_id_.end())
            throw DataError("timestamp not in vocabulary: " + std::to_string(y));
        return it->second;
    }

    const std::vector<Fact>& facts() const { return facts_; }
    const std::vector<Edge>& edges() const { return edges_; }
    const std::vector<std::size_t>& edges_from(std::size_t entity) const {
        return adjacency_.at(entity);
    }
    std::size_t truncated_facts() const { return truncated_facts_; }
    std::size_t expansion_cap() const { return cap_; }

    std::string verbalize_fact(std::size_t fact_id) const {
        const Fact& f = facts_.at(fact_id);
        return entity_name(f.subject) + " " + relation_name(f.relation) + " " +
               entity_name(f.object) + " from " + timestamp_name(f.t_begin) + " to " +
               timestamp_name(f.t_end);
    }

private:
    template <typename Fail>
    static std::int64_t parse_year(const std::string& s, Fail fail) {
        std::int64_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size()) fail("bad year '" + s + "'");
        return v;
    }

    static std::int64_t last_expanded_year(std::int64_t begin, std::int64_t end,
                                           std::size_t cap) {
        std::int64_t span = end - begin + 1;
        if (cap == 0 || span <= static_cast<std::int64_t>(cap)) return end;
        return begin + static_cast<std::int64_t>(cap) - 1;
    }

    std::size_t intern(std::unordered_map<std::string, std::size_t>& ids,
                       std::vector<std::string>& names, const std::string& name) {
        auto it = ids.find(name);
        if (it != ids.end()) return it->second;
        std::size_t id = names.size();
        names.push_back(name);
        ids.emplace(name, id);
        return id;
    }

    std::unordered_map<std::string, std::size_t> entity_ids_;
    std::vector<std::string> entity_names_;
    std::unordered_map<std::string, std::size_t> relation_ids_;
    std::vector<std::string> relation_names_;
    std::vector<std::int64_t> years_;
    std::map<std::int64_t, std::size_t> year_to_id_;
    std::vector<Fact> facts_;
    std::vector<Edge> edges_;
    std::vector<std::vector<std::size_t>> adjacency_;
    std::size_t truncated_facts_ = 0;
    std::size_t cap_ = kDefaultExpansionCap;
};

// Neighborhood of the annotated entities. Nodes are sorted global entity
// ids; `edges` holds store edge indices whose endpoints both lie in the
// node set. Candidate entities equal the node set; candidate timestamps are
// the edge timestamps (callers may union in annotated ones).
struct QuerySubgraph {
    std::vector<std::size_t> nodes;                    // sorted entity ids
    std::unordered_map<std::size_t, std::size_t> node_index;  // entity id -> row
    std::vector<std::size_t> edges;                    // indices into store.edges()
    std::vector<std::size_t> candidate_entities;       // == nodes
    std::vector<std::size_t> candidate_timestamps;     // sorted, unique
    std::vector<std::size_t> fact_pool;                // originating fact ids, sorted unique

    std::size_t size() const { return nodes.size(); }
};

inline QuerySubgraph extract_subgraph(const KGStore& store,
                                      const std::vector<std::size_t>& annotated_entities,
                                      std::size_t hops) {
    for (std::size_t e : annotated_entities)
        if (e >= store.entity_count())
            throw UsageError("annotated entity id out of range: " + std::to_string(e));
    if (annotated_entities.empty())
        throw DataError("no annotated entities resolve to the KG; question is unanswerable");

    // Multi-source BFS; inverse edges make reachability effectively undirected.
    std::unordered_map<std::size_t, std::size_t> dist;
    std::deque<std::size_t> frontier;
    for (std::size_t e : annotated_entities)
        if (!dist.count(e)) {
            dist[e] = 0;
            frontier.push_back(e);
        }
    while (!frontier.empty()) {
        std::size_t v = frontier.front();
        frontier.pop_front();
        std::size_t d = dist[v];
        if (d == hops) continue;
        for (std::size_t ei : store.edges_from(v)) {
            std::size_t u = store.edges()[ei].dst;
            if (!dist.count(u)) {
                dist[u] = d + 1;
                frontier.push_back(u);
            }
        }
    }

    QuerySubgraph g;
    g.nodes.reserve(dist.size());
    for (const auto& [v, d] : dist) g.nodes.push_back(v);
    std::sort(g.nodes.begin(), g.nodes.end());
    for (std::size_t i = 0; i < g.nodes.size(); ++i) g.node_index[g.nodes[i]] = i;

    std::set<std::size_t> ts;
    std::set<std::size_t> pool;
    for (std::size_t v : g.nodes) {
        for (std::size_t ei : store.edges_from(v)) {
            const Edge& e = store.edges()[ei];
            if (!g.node_index.count(e.dst)) continue;
            g.edges.push_back(ei);
            ts.insert(e.ts);
            pool.insert(e.fact);
        }
    }
    g.candidate_entities = g.nodes;
    g.candidate_timestamps.assign(ts.begin(), ts.end());
    g.fact_pool.assign(pool.begin(), pool.end());
    return g;
}

// ---- question file loading ----

struct QuestionLoadStats {
    std::size_t loaded = 0;
    std::size_t skipped = 0;  // questions with no resolvable annotation or answer
    std::vector<std::string> warnings;
};

inline std::vector<QuestionInstance> load_questions(const std::string& path,
                                                    const KGStore& store,
                                                    QuestionLoadStats& stats) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open question file: " + path);
    std::vector<QuestionInstance> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError("question line " + std::to_string(lineno) + ": " + e.what());
        }
        auto need = [&](const char* key) -> const nlohmann::json& {
            if (!j.contains(key))
                throw DataError("question line " + std::to_string(lineno) +
                                ": missing field '" + key + "'");
            return j[key];
        };
        QuestionInstance q;
        q.text = need("text").get<std::string>();
        std::string at = need("answer_type").get<std::string>();
        if (at == "entity")
            q.answer_type = AnswerType::entity;
        else if (at == "time")
            q.answer_type = AnswerType::time;
        else
            throw DataError("question line " + std::to_string(lineno) + ": bad answer_type '" +
                            at + "'");
        q.category = category_from_name(need("category").get<std::string>());

        for (const auto& e : need("entities")) {
            std::string name = e.get<std::string>();
            if (store.has_entity(name)) {
                q.entities.push_back(store.entity_id(name));
            } else {
                stats.warnings.push_back("line " + std::to_string(lineno) +
                                         ": annotated entity not in KG: " + name);
            }
        }
        for (const auto& t : need("timestamps")) {
            std::string s = t.get<std::string>();
            std::int64_t y = 0;
            auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), y);
            if (ec != std::errc{} || p != s.data() + s.size())
                throw DataError("question line " + std::to_string(lineno) +
                                ": bad timestamp '" + s + "'");
            if (store.has_year(y)) {
                q.timestamps.push_back(store.timestamp_id(y));
            } else {
                stats.warnings.push_back("line " + std::to_string(lineno) +
                                         ": annotated timestamp not in KG: " + s);
            }
        }
        for (const auto& a : need("answers")) {
            std::string s = a.get<std::string>();
            if (q.answer_type == AnswerType::entity) {
                if (store.has_entity(s)) q.answers.push_back(store.entity_id(s));
            } else {
                std::int64_t y = 0;
                auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), y);
                if (ec == std::errc{} && p == s.data() + s.size() && store.has_year(y))
                    q.answers.push_back(store.timestamp_id(y));
            }
        }
        if (q.entities.empty() || q.answers.empty()) {
            ++stats.skipped;
            stats.warnings.push_back("line " + std::to_string(lineno) +
                                     ": skipped (no resolvable annotated entity or answer)");
            continue;
        }
        ++stats.loaded;
        out.push_back(std::move(q));
    }
    return out;
}

}  // namespace tkgqa
