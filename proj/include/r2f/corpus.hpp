// SPDX-License-Identifier: Apache-2.0
//
// Synthetic (subject, relation, object) fact corpus with template paraphrases.
//
// Every word is one token: template words, relation words, subject entities
// and object entities. Objects come in per-relation families, so each fact's
// answer is a single token drawn from its relation's family.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "r2f/model.hpp"

namespace r2f {

class Vocabulary {
public:
    static constexpr std::size_t kPad = 0;

    Vocabulary();
    std::size_t add(const std::string& word);
    std::size_t id(const std::string& word) const;
    bool contains(const std::string& word) const { return index_.count(word) != 0; }
    const std::string& word(std::size_t id) const { return words_.at(id); }
    std::size_t size() const noexcept { return words_.size(); }
    const std::vector<std::string>& words() const noexcept { return words_; }

    Tokens encode(const std::vector<std::string>& words) const;
    std::string decode(const Tokens& tokens) const;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct Fact {
    std::size_t id = 0;
    std::size_t subject = 0;
    std::size_t relation = 0;
    std::size_t object = 0;  // token id of the answer
    Tokens prompt;           // canonical prompt
    std::size_t answer = 0;  // same as object
};

enum class Split { retain, target };

struct CorpusConfig {
    std::size_t n_facts = 200;
    std::size_t n_relations = 5;
    std::size_t objects_per_relation = 8;
    double target_fraction = 0.1;
    std::size_t vocab_size = 128;
    std::uint64_t seed = 0;
};

struct Corpus {
    CorpusConfig config;
    Vocabulary vocab;
    std::vector<Fact> facts;
    std::vector<std::size_t> retain;  // fact ids, ascending
    std::vector<std::size_t> target;  // fact ids, ascending
    std::vector<std::size_t> relation_words;                 // token id per relation
    std::vector<std::size_t> subject_tokens;                 // token id per subject
    std::vector<std::vector<std::size_t>> relation_objects;  // answer family per relation
    std::vector<std::vector<std::size_t>> template_order;    // template ids per relation, canonical first

    Split split_of(std::size_t fact_id) const;
    /// Every object token of every relation, ascending.
    std::vector<std::size_t> answer_vocabulary() const;
};

/// Number of templates in the shared pool. Template 0 is the canonical form.
std::size_t template_count();

/// Renders template `template_id` for `fact`.
Tokens render_template(const Corpus& corpus, const Fact& fact, std::size_t template_id);

Corpus build_synthetic_corpus(const CorpusConfig& config);

struct ParaphraseSet {
    std::size_t fact_id = 0;
    std::vector<Tokens> prompts;
    std::vector<std::size_t> template_ids;
};

/// The first `n` templates of the fact's relation order. The `seed` rotates
/// which non-canonical templates are used; the canonical prompt stays first.
ParaphraseSet generate_paraphrases(const Corpus& corpus, const Fact& fact, std::size_t n, std::uint64_t seed);

/// Cosine similarity of mean-pooled final hidden states.
double prompt_similarity(const ModelParams& model, const Tokens& a, const Tokens& b);

/// Keeps prompts whose embedding cosine to the canonical (first) prompt is at
/// least `tau`. The canonical prompt is always kept.
ParaphraseSet filter_paraphrases(const ParaphraseSet& set, const ModelParams& model, double tau);

/// One example per (fact, template) for the given facts.
std::vector<LmExample> training_examples(const Corpus& corpus, const std::vector<std::size_t>& fact_ids);
std::vector<LmExample> canonical_examples(const Corpus& corpus, const std::vector<std::size_t>& fact_ids);
std::vector<std::size_t> all_fact_ids(const Corpus& corpus);

/// Fraction of facts whose greedy answer on every rendered template (filtered
/// at `tau`) equals the canonical answer.
double paraphrase_fidelity(const Corpus& corpus, const ModelParams& model, const std::vector<std::size_t>& fact_ids,
                           std::size_t views, double tau);

/// Non-canonical template prompts of the given facts, in (fact, template)
/// order, truncated to `limit` (0 means no limit).
std::vector<LmExample> paraphrase_pool(const Corpus& corpus, const std::vector<std::size_t>& fact_ids,
                                       std::size_t limit);

/// Line-delimited JSON: a header object, then one object per fact.
void export_corpus(const Corpus& corpus, std::ostream& out);
Corpus import_corpus(std::istream& in);

}  // namespace r2f
