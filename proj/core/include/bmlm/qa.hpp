#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "bmlm/tokenizer.hpp"
#include "bmlm/transformer.hpp"

namespace bmlm {

struct McqExample {
    std::string id;
    std::string question;
    std::vector<std::string> options;
    std::size_t gold = 0;
};

struct ClsExample {
    std::string id;
    std::string context;
    std::string question;
    std::string gold;
};

struct GenExample {
    std::string id;
    std::string question;
    std::string answer;
};

// Loader output; `skipped` is populated only in permissive mode.
template <class T>
struct Loaded {
    std::vector<T> examples;
    std::vector<std::pair<std::size_t, std::string>> skipped;
};

// JSONL loaders. Strict mode throws ParseError/DataError naming the 1-based
// line on the first invalid record; permissive mode skips and records it.
Loaded<McqExample> load_mcq(const std::filesystem::path& path, bool strict = true);
Loaded<ClsExample> load_cls(const std::filesystem::path& path,
                            const std::vector<std::string>& labels, bool strict = true);
Loaded<GenExample> load_gen(const std::filesystem::path& path, bool strict = true);

// Accessor interfaces. They receive only ids and visible text, never the
// gold answer, so instrumenting them verifies gold-hiding.
class OptionScorer {
public:
    virtual ~OptionScorer() = default;
    virtual std::vector<double> score(const std::string& id, const std::string& question,
                                      const std::vector<std::string>& options) = 0;
};

class SequenceClassifier {
public:
    virtual ~SequenceClassifier() = default;
    virtual std::vector<double> score(const std::string& id, const std::string& context,
                                      const std::string& question) = 0;
};

class AnswerGenerator {
public:
    virtual ~AnswerGenerator() = default;
    virtual std::string generate(const std::string& id, const std::string& question) = 0;
};

// Self-test backends. The oracles look the gold up by example id in their own
// table; constant predictors ignore the input entirely. Neither is a model.
class OracleOptionScorer : public OptionScorer {
public:
    explicit OracleOptionScorer(std::unordered_map<std::string, std::size_t> golds)
        : golds_(std::move(golds)) {}
    std::vector<double> score(const std::string& id, const std::string& question,
                              const std::vector<std::string>& options) override;

private:
    std::unordered_map<std::string, std::size_t> golds_;
};

class ConstantOptionScorer : public OptionScorer {
public:
    explicit ConstantOptionScorer(std::size_t index) : index_(index) {}
    std::vector<double> score(const std::string& id, const std::string& question,
                              const std::vector<std::string>& options) override;

private:
    std::size_t index_;
};

class OracleSequenceClassifier : public SequenceClassifier {
public:
    OracleSequenceClassifier(std::unordered_map<std::string, std::size_t> gold_indices,
                             std::size_t num_labels)
        : golds_(std::move(gold_indices)), num_labels_(num_labels) {}
    std::vector<double> score(const std::string& id, const std::string& context,
                              const std::string& question) override;

private:
    std::unordered_map<std::string, std::size_t> golds_;
    std::size_t num_labels_;
};

class ConstantSequenceClassifier : public SequenceClassifier {
public:
    ConstantSequenceClassifier(std::size_t index, std::size_t num_labels)
        : index_(index), num_labels_(num_labels) {}
    std::vector<double> score(const std::string& id, const std::string& context,
                              const std::string& question) override;

private:
    std::size_t index_;
    std::size_t num_labels_;
};

// Prompt construction shared by fine-tuning and evaluation so both sides see
// byte-identical token sequences. Options get a leading space so their first
// word glues to the question the way continuation text would.
struct McqPrompt {
    std::vector<TokenId> question;
    std::vector<std::vector<TokenId>> options;
};
McqPrompt build_mcq_prompt(const TokenizerModel& tokenizer, const std::string& question,
                           const std::vector<std::string>& options);

extern const char* const kCtxToken;
extern const char* const kQstToken;
extern const char* const kAnsToken;
extern const char* const kEndOfTextToken;

// Looks up the [CTX]/[QST]/[ANS] marker ids; throws ConfigError when the
// tokenizer was not derived with them.
ClsMarkers cls_markers(const TokenizerModel& tokenizer);

// Checkpoint-backed accessors.
class ModelOptionScorer : public OptionScorer {
public:
    ModelOptionScorer(const Model<float>& model, const TokenizerModel& tokenizer)
        : model_(model), tokenizer_(tokenizer) {}
    std::vector<double> score(const std::string& id, const std::string& question,
                              const std::vector<std::string>& options) override;

private:
    const Model<float>& model_;
    const TokenizerModel& tokenizer_;
};

class ModelSequenceClassifier : public SequenceClassifier {
public:
    ModelSequenceClassifier(const Model<float>& model, const TokenizerModel& tokenizer);
    std::vector<double> score(const std::string& id, const std::string& context,
                              const std::string& question) override;

private:
    const Model<float>& model_;
    const TokenizerModel& tokenizer_;
    ClsMarkers markers_;
};

class ModelAnswerGenerator : public AnswerGenerator {
public:
    ModelAnswerGenerator(const Model<float>& model, const TokenizerModel& tokenizer,
                         GenerateStrategy strategy, std::size_t max_new);
    std::string generate(const std::string& id, const std::string& question) override;

private:
    const Model<float>& model_;
    const TokenizerModel& tokenizer_;
    GenerateStrategy strategy_;
    std::size_t max_new_;
    std::optional<TokenId> stop_;
};

struct ItemResult {
    std::string id;
    std::size_t prediction = 0;
    std::size_t gold = 0;
    std::vector<double> scores;
};

struct EvalReport {
    std::string dataset_id;
    std::size_t n = 0;
    double accuracy = 0.0;
    std::vector<ItemResult> items;
    // Classification only: label names and confusion[gold][prediction].
    std::vector<std::string> labels;
    std::vector<std::vector<std::size_t>> confusion;

    std::string to_json(const std::string& tool_version, const std::string& checkpoint_hash) const;
};

EvalReport evaluate_mcq(OptionScorer& scorer, const std::vector<McqExample>& examples,
                        const std::string& dataset_id);
EvalReport evaluate_cls(SequenceClassifier& classifier, const std::vector<ClsExample>& examples,
                        const std::vector<std::string>& labels, const std::string& dataset_id);

struct TranscriptEntry {
    std::string id;
    std::string question;
    std::string reference;
    std::string generated;
};

struct Transcript {
    std::string dataset_id;
    std::string decode_settings;
    std::uint64_t seed = 0;
    std::vector<TranscriptEntry> entries;

    std::string to_json(const std::string& tool_version, const std::string& checkpoint_hash) const;
};

Transcript generate_answers(AnswerGenerator& generator, const std::vector<GenExample>& examples,
                            const std::string& dataset_id, const std::string& decode_settings,
                            std::uint64_t seed);

}  // namespace bmlm
