// SPDX-License-Identifier: Apache-2.0

#include "r2f/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "r2f/error.hpp"
#include "r2f/random.hpp"

namespace r2f {

namespace {

// "R" and "S" are replaced by the relation word and the subject entity.
const std::vector<std::vector<std::string>>& template_pool() {
    static const std::vector<std::vector<std::string>> pool{
        {"the", "R", "of", "S", "is"},
        {"S", "'s", "R", "is"},
        {"what", "is", "the", "R", "of", "S", "?"},
        {"the", "R", "for", "S", ":"},
        {"S", "has", "the", "R"},
        {"q", ":", "R", "of", "S", "?", "a", ":"},
        {"name", "the", "R", "of", "S", ":"},
        {"S", ",", "R", ":"},
        {"tell", "me", "the", "R", "of", "S", "."},
        {"which", "R", "does", "S", "have", "?"},
        {"R", "of", "S", "="},
        {"as", "for", "S", ",", "the", "R", "is"},
    };
    return pool;
}

const std::vector<std::pair<std::string, std::string>>& relation_names() {
    // relation word, object family prefix
    static const std::vector<std::pair<std::string, std::string>> names{
        {"capital", "city"}, {"language", "lang"}, {"currency", "coin"}, {"continent", "land"},
        {"color", "hue"},    {"sport", "game"},    {"river", "water"},   {"animal", "beast"},
    };
    return names;
}

std::string numbered(const std::string& prefix, std::size_t i) { return prefix + std::to_string(i); }

}  // namespace

Vocabulary::Vocabulary() { add("<pad>"); }

std::size_t Vocabulary::add(const std::string& word) {
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    words_.push_back(word);
    index_.emplace(word, words_.size() - 1);
    return words_.size() - 1;
}

std::size_t Vocabulary::id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) fail(ErrorKind::config, "unknown word '" + word + "'");
    return it->second;
}

Tokens Vocabulary::encode(const std::vector<std::string>& words) const {
    Tokens out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
}

std::string Vocabulary::decode(const Tokens& tokens) const {
    std::string out;
    for (auto t : tokens) {
        if (!out.empty()) out += ' ';
        out += word(t);
    }
    return out;
}

Split Corpus::split_of(std::size_t fact_id) const {
    return std::binary_search(target.begin(), target.end(), fact_id) ? Split::target : Split::retain;
}

std::vector<std::size_t> Corpus::answer_vocabulary() const {
    std::vector<std::size_t> out;
    for (const auto& fam : relation_objects) out.insert(out.end(), fam.begin(), fam.end());
    std::sort(out.begin(), out.end());
    return out;
}

std::size_t template_count() { return template_pool().size(); }

Tokens render_template(const Corpus& corpus, const Fact& fact, std::size_t template_id) {
    if (template_id >= template_count()) fail(ErrorKind::config, "unknown template " + std::to_string(template_id));
    Tokens out;
    for (const auto& w : template_pool()[template_id]) {
        if (w == "R") {
            out.push_back(corpus.relation_words.at(fact.relation));
        } else if (w == "S") {
            out.push_back(corpus.subject_tokens.at(fact.subject));
        } else {
            out.push_back(corpus.vocab.id(w));
        }
    }
    return out;
}

Corpus build_synthetic_corpus(const CorpusConfig& config) {
    if (config.n_facts < 20) fail(ErrorKind::config, "corpus: n_facts must be >= 20");
    if (config.n_relations == 0 || config.n_relations > relation_names().size()) {
        fail(ErrorKind::config, "corpus: n_relations must be in [1, " + std::to_string(relation_names().size()) + "]");
    }
    if (config.objects_per_relation < 2) fail(ErrorKind::config, "corpus: objects_per_relation must be >= 2");
    if (!(config.target_fraction > 0.0 && config.target_fraction < 1.0)) {
        fail(ErrorKind::config, "corpus: target_fraction must be in (0, 1)");
    }
    const std::size_t n_subjects = (config.n_facts + config.n_relations - 1) / config.n_relations;

    Corpus c;
    c.config = config;
    for (const auto& tpl : template_pool()) {
        for (const auto& w : tpl) {
            if (w != "R" && w != "S") c.vocab.add(w);
        }
    }
    for (std::size_t r = 0; r < config.n_relations; ++r) c.relation_words.push_back(c.vocab.add(relation_names()[r].first));
    for (std::size_t s = 0; s < n_subjects; ++s) c.subject_tokens.push_back(c.vocab.add(numbered("ent", s)));
    c.relation_objects.resize(config.n_relations);
    for (std::size_t r = 0; r < config.n_relations; ++r) {
        for (std::size_t o = 0; o < config.objects_per_relation; ++o) {
            c.relation_objects[r].push_back(c.vocab.add(numbered(relation_names()[r].second, o)));
        }
    }
    if (c.vocab.size() > config.vocab_size) {
        fail(ErrorKind::config, "corpus: needs " + std::to_string(c.vocab.size()) + " tokens but vocab_size is " +
                                    std::to_string(config.vocab_size));
    }

    // Subject-major enumeration of (subject, relation) keys, so keys are unique
    // by construction. Objects are drawn uniformly from the relation's family.
    Rng obj_rng(derive_seed(config.seed, "corpus.objects"));
    for (std::size_t i = 0; i < config.n_facts; ++i) {
        Fact f;
        f.id = i;
        f.subject = i / config.n_relations;
        f.relation = i % config.n_relations;
        std::uniform_int_distribution<std::size_t> pick(0, config.objects_per_relation - 1);
        f.object = c.relation_objects[f.relation][pick(obj_rng)];
        f.answer = f.object;
        c.facts.push_back(std::move(f));
    }

    for (std::size_t r = 0; r < config.n_relations; ++r) {
        std::vector<std::size_t> order(template_count() - 1);
        std::iota(order.begin(), order.end(), 1);
        Rng rng(derive_seed(config.seed, "corpus.templates." + std::to_string(r)));
        std::shuffle(order.begin(), order.end(), rng);
        order.insert(order.begin(), 0);
        c.template_order.push_back(std::move(order));
    }
    for (auto& f : c.facts) f.prompt = render_template(c, f, 0);

    const auto n_target = static_cast<std::size_t>(std::llround(config.target_fraction * static_cast<double>(config.n_facts)));
    std::vector<std::size_t> ids(config.n_facts);
    std::iota(ids.begin(), ids.end(), 0);
    Rng split_rng(derive_seed(config.seed, "corpus.split"));
    std::shuffle(ids.begin(), ids.end(), split_rng);
    c.target.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_target));
    c.retain.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_target), ids.end());
    std::sort(c.target.begin(), c.target.end());
    std::sort(c.retain.begin(), c.retain.end());
    return c;
}

ParaphraseSet generate_paraphrases(const Corpus& corpus, const Fact& fact, std::size_t n, std::uint64_t seed) {
    const auto& order = corpus.template_order.at(fact.relation);
    if (n == 0) fail(ErrorKind::config, "paraphrases: N must be >= 1");
    if (n > order.size()) {
        fail(ErrorKind::config, "paraphrases: N = " + std::to_string(n) + " exceeds the " +
                                    std::to_string(order.size()) + " available templates");
    }
    std::vector<std::size_t> rest(order.begin() + 1, order.end());
    Rng rng(derive_seed(seed, "paraphrase.relation." + std::to_string(fact.relation)));
    std::shuffle(rest.begin(), rest.end(), rng);
    ParaphraseSet out;
    out.fact_id = fact.id;
    out.template_ids.push_back(order[0]);
    out.template_ids.insert(out.template_ids.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n - 1));
    for (auto t : out.template_ids) out.prompts.push_back(render_template(corpus, fact, t));
    return out;
}

namespace {

double cosine(const Tensor& a, const Tensor& b) {
    const double na = l2_norm(a.data());
    const double nb = l2_norm(b.data());
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a.data(), b.data()) / (na * nb);
}

}  // namespace

double prompt_similarity(const ModelParams& model, const Tokens& a, const Tokens& b) {
    return cosine(embed_prompt(model, nullptr, a), embed_prompt(model, nullptr, b));
}

ParaphraseSet filter_paraphrases(const ParaphraseSet& set, const ModelParams& model, double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) fail(ErrorKind::config, "filter: tau must be in [0, 1]");
    if (set.prompts.empty()) fail(ErrorKind::config, "filter: empty paraphrase set");
    ParaphraseSet out;
    out.fact_id = set.fact_id;
    out.prompts.push_back(set.prompts[0]);
    out.template_ids.push_back(set.template_ids[0]);
    if (set.prompts.size() == 1) return out;
    const Tensor anchor = embed_prompt(model, nullptr, set.prompts[0]);
    for (std::size_t i = 1; i < set.prompts.size(); ++i) {
        if (tau > 0.0 && cosine(anchor, embed_prompt(model, nullptr, set.prompts[i])) < tau) continue;
        out.prompts.push_back(set.prompts[i]);
        out.template_ids.push_back(set.template_ids[i]);
    }
    return out;
}

std::vector<std::size_t> all_fact_ids(const Corpus& corpus) {
    std::vector<std::size_t> ids(corpus.facts.size());
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
}

std::vector<LmExample> training_examples(const Corpus& corpus, const std::vector<std::size_t>& fact_ids) {
    std::vector<LmExample> out;
    for (auto id : fact_ids) {
        const Fact& f = corpus.facts.at(id);
        for (auto t : corpus.template_order.at(f.relation)) out.push_back({render_template(corpus, f, t), f.answer});
    }
    return out;
}

std::vector<LmExample> canonical_examples(const Corpus& corpus, const std::vector<std::size_t>& fact_ids) {
    std::vector<LmExample> out;
    for (auto id : fact_ids) out.push_back({corpus.facts.at(id).prompt, corpus.facts.at(id).answer});
    return out;
}

double paraphrase_fidelity(const Corpus& corpus, const ModelParams& model, const std::vector<std::size_t>& fact_ids,
                           std::size_t views, double tau) {
    if (fact_ids.empty()) return 0.0;
    std::size_t ok = 0;
    for (auto id : fact_ids) {
        const Fact& f = corpus.facts.at(id);
        const ParaphraseSet kept = filter_paraphrases(generate_paraphrases(corpus, f, views, 0), model, tau);
        const auto answers = greedy_answers(model, nullptr, kept.prompts);
        ok += std::all_of(answers.begin(), answers.end(), [&](std::size_t a) { return a == f.answer; }) ? 1 : 0;
    }
    return static_cast<double>(ok) / static_cast<double>(fact_ids.size());
}

std::vector<LmExample> paraphrase_pool(const Corpus& corpus, const std::vector<std::size_t>& fact_ids,
                                       std::size_t limit) {
    std::vector<LmExample> out;
    for (auto id : fact_ids) {
        const Fact& f = corpus.facts.at(id);
        const auto& order = corpus.template_order.at(f.relation);
        for (std::size_t i = 1; i < order.size(); ++i) {
            if (limit != 0 && out.size() == limit) return out;
            out.push_back({render_template(corpus, f, order[i]), f.answer});
        }
    }
    return out;
}

void export_corpus(const Corpus& c, std::ostream& out) {
    using nlohmann::json;
    json head;
    head["kind"] = "r2f-corpus";
    head["version"] = 1;
    head["n_facts"] = c.config.n_facts;
    head["n_relations"] = c.config.n_relations;
    head["objects_per_relation"] = c.config.objects_per_relation;
    head["target_fraction"] = c.config.target_fraction;
    head["vocab_size"] = c.config.vocab_size;
    head["seed"] = c.config.seed;
    head["vocab"] = c.vocab.words();
    head["relation_words"] = c.relation_words;
    head["subject_tokens"] = c.subject_tokens;
    head["relation_objects"] = c.relation_objects;
    head["template_order"] = c.template_order;
    out << head.dump() << '\n';
    for (const auto& f : c.facts) {
        json row;
        row["id"] = f.id;
        row["subject"] = f.subject;
        row["relation"] = f.relation;
        row["object"] = f.object;
        row["prompt"] = f.prompt;
        row["text"] = c.vocab.decode(f.prompt) + " " + c.vocab.word(f.answer);
        row["split"] = c.split_of(f.id) == Split::target ? "target" : "retain";
        out << row.dump() << '\n';
    }
    if (!out) fail(ErrorKind::io, "corpus export: write failed");
}

Corpus import_corpus(std::istream& in) {
    using nlohmann::json;
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::io, "corpus import: empty input");
    Corpus c;
    try {
        const json head = json::parse(line);
        if (head.at("kind") != "r2f-corpus" || head.at("version") != 1) fail(ErrorKind::io, "corpus import: bad header");
        c.config.n_facts = head.at("n_facts");
        c.config.n_relations = head.at("n_relations");
        c.config.objects_per_relation = head.at("objects_per_relation");
        c.config.target_fraction = head.at("target_fraction");
        c.config.vocab_size = head.at("vocab_size");
        c.config.seed = head.at("seed");
        const auto words = head.at("vocab").get<std::vector<std::string>>();
        if (words.empty() || words[0] != "<pad>") fail(ErrorKind::io, "corpus import: vocabulary must start with <pad>");
        for (std::size_t i = 1; i < words.size(); ++i) {
            if (c.vocab.add(words[i]) != i) fail(ErrorKind::io, "corpus import: duplicate word '" + words[i] + "'");
        }
        c.relation_words = head.at("relation_words").get<std::vector<std::size_t>>();
        c.subject_tokens = head.at("subject_tokens").get<std::vector<std::size_t>>();
        c.relation_objects = head.at("relation_objects").get<std::vector<std::vector<std::size_t>>>();
        c.template_order = head.at("template_order").get<std::vector<std::vector<std::size_t>>>();
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json row = json::parse(line);
            Fact f;
            f.id = row.at("id");
            f.subject = row.at("subject");
            f.relation = row.at("relation");
            f.object = row.at("object");
            f.answer = f.object;
            f.prompt = row.at("prompt").get<Tokens>();
            if (f.id != c.facts.size()) fail(ErrorKind::io, "corpus import: fact ids out of order");
            (row.at("split") == "target" ? c.target : c.retain).push_back(f.id);
            c.facts.push_back(std::move(f));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::io, std::string("corpus import: ") + e.what());
    }
    if (c.facts.size() != c.config.n_facts) fail(ErrorKind::io, "corpus import: fact count does not match header");
    return c;
}

}  // namespace r2f
