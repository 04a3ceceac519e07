#include "bmlm/qa.hpp"

#include <algorithm>

#include "json.hpp"

#include "bmlm/errors.hpp"
#include "bmlm/io.hpp"

namespace bmlm {

const char* const kCtxToken = "[CTX]";
const char* const kQstToken = "[QST]";
const char* const kAnsToken = "[ANS]";
const char* const kEndOfTextToken = "<|endoftext|>";

namespace {

// Parses one JSONL record or throws ParseError/DataError with the line.
nlohmann::json parse_record(const std::string& line, std::size_t line_number) {
    try {
        return nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("invalid JSON: ") + e.what(), line_number);
    }
}

std::string require_string(const nlohmann::json& j, const char* field, std::size_t line_number) {
    if (!j.contains(field) || !j.at(field).is_string()) {
        throw ParseError(std::string("missing or non-string field '") + field + "'", line_number);
    }
    return j.at(field).get<std::string>();
}

bool is_blank(const std::string& line) {
    return std::all_of(line.begin(), line.end(),
                       [](unsigned char c) { return c == ' ' || c == '\t' || c == '\r'; });
}

// Shared strict/permissive line loop: parse_one throws on a bad record.
template <class T, class ParseOne>
Loaded<T> load_lines(const std::filesystem::path& path, bool strict, ParseOne parse_one) {
    Loaded<T> out;
    const std::vector<std::string> lines = split_lines(read_file(path));
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (is_blank(lines[i])) continue;
        const std::size_t line_number = i + 1;
        try {
            out.examples.push_back(parse_one(lines[i], line_number));
        } catch (const DataError& e) {
            if (strict) throw;
            out.skipped.emplace_back(line_number, e.what());
        }
    }
    return out;
}

}  // namespace

Loaded<McqExample> load_mcq(const std::filesystem::path& path, bool strict) {
    return load_lines<McqExample>(path, strict, [](const std::string& line, std::size_t n) {
        const nlohmann::json j = parse_record(line, n);
        McqExample ex;
        ex.id = require_string(j, "id", n);
        ex.question = require_string(j, "question", n);
        if (!j.contains("options") || !j.at("options").is_array()) {
            throw ParseError("missing or non-array field 'options'", n);
        }
        for (const auto& o : j.at("options")) {
            if (!o.is_string()) throw ParseError("options must be strings", n);
            ex.options.push_back(o.get<std::string>());
            if (ex.options.back().empty()) throw ParseError("options must be non-empty", n);
        }
        if (ex.options.size() < 2 || ex.options.size() > 26) {
            throw ParseError("options count must be between 2 and 26", n);
        }
        if (!j.contains("gold") || !j.at("gold").is_number_unsigned()) {
            throw ParseError("missing or invalid field 'gold'", n);
        }
        ex.gold = j.at("gold").get<std::size_t>();
        if (ex.gold >= ex.options.size()) {
            throw ParseError("gold index " + std::to_string(ex.gold) + " out of range for " +
                                 std::to_string(ex.options.size()) + " options",
                             n);
        }
        return ex;
    });
}

Loaded<ClsExample> load_cls(const std::filesystem::path& path,
                            const std::vector<std::string>& labels, bool strict) {
    if (labels.empty()) throw ConfigError("classification label set is empty");
    return load_lines<ClsExample>(path, strict, [&labels](const std::string& line, std::size_t n) {
        const nlohmann::json j = parse_record(line, n);
        ClsExample ex;
        ex.id = require_string(j, "id", n);
        ex.context = require_string(j, "context", n);
        ex.question = require_string(j, "question", n);
        ex.gold = require_string(j, "gold", n);
        if (std::find(labels.begin(), labels.end(), ex.gold) == labels.end()) {
            throw ParseError("gold label '" + ex.gold + "' not in the label set", n);
        }
        return ex;
    });
}

Loaded<GenExample> load_gen(const std::filesystem::path& path, bool strict) {
    return load_lines<GenExample>(path, strict, [](const std::string& line, std::size_t n) {
        const nlohmann::json j = parse_record(line, n);
        GenExample ex;
        ex.id = require_string(j, "id", n);
        ex.question = require_string(j, "question", n);
        ex.answer = require_string(j, "answer", n);
        if (ex.question.empty() || ex.answer.empty()) {
            throw ParseError("question and answer must be non-empty", n);
        }
        return ex;
    });
}

std::vector<double> OracleOptionScorer::score(const std::string& id, const std::string&,
                                              const std::vector<std::string>& options) {
    auto it = golds_.find(id);
    if (it == golds_.end()) throw DataError("oracle has no gold for id '" + id + "'");
    std::vector<double> s(options.size(), 0.0);
    if (it->second >= s.size()) throw DataError("oracle gold out of range for id '" + id + "'");
    s[it->second] = 1.0;
    return s;
}

std::vector<double> ConstantOptionScorer::score(const std::string&, const std::string&,
                                                const std::vector<std::string>& options) {
    std::vector<double> s(options.size(), 0.0);
    s[std::min(index_, options.size() - 1)] = 1.0;
    return s;
}

std::vector<double> OracleSequenceClassifier::score(const std::string& id, const std::string&,
                                                    const std::string&) {
    auto it = golds_.find(id);
    if (it == golds_.end()) throw DataError("oracle has no gold for id '" + id + "'");
    std::vector<double> s(num_labels_, 0.0);
    if (it->second >= s.size()) throw DataError("oracle gold out of range for id '" + id + "'");
    s[it->second] = 1.0;
    return s;
}

std::vector<double> ConstantSequenceClassifier::score(const std::string&, const std::string&,
                                                      const std::string&) {
    std::vector<double> s(num_labels_, 0.0);
    s[std::min(index_, num_labels_ - 1)] = 1.0;
    return s;
}

McqPrompt build_mcq_prompt(const TokenizerModel& tokenizer, const std::string& question,
                           const std::vector<std::string>& options) {
    McqPrompt prompt;
    prompt.question = tokenizer.encode_ids(question);
    prompt.options.reserve(options.size());
    for (const std::string& option : options) {
        prompt.options.push_back(tokenizer.encode_ids(" " + option));
    }
    return prompt;
}

ClsMarkers cls_markers(const TokenizerModel& tokenizer) {
    const auto ctx = tokenizer.find_id(kCtxToken);
    const auto qst = tokenizer.find_id(kQstToken);
    const auto ans = tokenizer.find_id(kAnsToken);
    if (!ctx || !qst || !ans) {
        throw ConfigError("tokenizer lacks the [CTX]/[QST]/[ANS] marker tokens");
    }
    return ClsMarkers{*ctx, *qst, *ans};
}

std::vector<double> ModelOptionScorer::score(const std::string&, const std::string& question,
                                             const std::vector<std::string>& options) {
    const McqPrompt prompt = build_mcq_prompt(tokenizer_, question, options);
    return model_.score_options(prompt.question, prompt.options);
}

ModelSequenceClassifier::ModelSequenceClassifier(const Model<float>& model,
                                                 const TokenizerModel& tokenizer)
    : model_(model), tokenizer_(tokenizer), markers_(cls_markers(tokenizer)) {}

std::vector<double> ModelSequenceClassifier::score(const std::string&, const std::string& context,
                                                   const std::string& question) {
    return model_.classify_sequence(tokenizer_.encode_ids(context),
                                    tokenizer_.encode_ids(question), markers_);
}

ModelAnswerGenerator::ModelAnswerGenerator(const Model<float>& model,
                                           const TokenizerModel& tokenizer,
                                           GenerateStrategy strategy, std::size_t max_new)
    : model_(model), tokenizer_(tokenizer), strategy_(strategy), max_new_(max_new) {
    stop_ = tokenizer.find_id(kEndOfTextToken);
}

std::string ModelAnswerGenerator::generate(const std::string&, const std::string& question) {
    const std::vector<TokenId> prompt = tokenizer_.encode_ids(question);
    const std::vector<TokenId> full = model_.generate(prompt, strategy_, max_new_, stop_);
    return tokenizer_.decode(
        std::vector<TokenId>(full.begin() + static_cast<std::ptrdiff_t>(prompt.size()), full.end()));
}

EvalReport evaluate_mcq(OptionScorer& scorer, const std::vector<McqExample>& examples,
                        const std::string& dataset_id) {
    EvalReport report;
    report.dataset_id = dataset_id;
    std::size_t correct = 0;
    for (const McqExample& ex : examples) {
        ItemResult item;
        item.id = ex.id;
        item.gold = ex.gold;
        item.scores = scorer.score(ex.id, ex.question, ex.options);
        if (item.scores.size() != ex.options.size()) {
            throw ContractError("scorer returned " + std::to_string(item.scores.size()) +
                                " scores for " + std::to_string(ex.options.size()) + " options");
        }
        item.prediction = argmax_lowest(item.scores);
        correct += item.prediction == item.gold ? 1 : 0;
        report.items.push_back(std::move(item));
    }
    report.n = examples.size();
    report.accuracy = report.n == 0 ? 0.0
                                    : static_cast<double>(correct) / static_cast<double>(report.n);
    return report;
}

EvalReport evaluate_cls(SequenceClassifier& classifier, const std::vector<ClsExample>& examples,
                        const std::vector<std::string>& labels, const std::string& dataset_id) {
    if (labels.empty()) throw ConfigError("classification label set is empty");
    EvalReport report;
    report.dataset_id = dataset_id;
    report.labels = labels;
    report.confusion.assign(labels.size(), std::vector<std::size_t>(labels.size(), 0));
    std::size_t correct = 0;
    for (const ClsExample& ex : examples) {
        ItemResult item;
        item.id = ex.id;
        const auto gold_it = std::find(labels.begin(), labels.end(), ex.gold);
        if (gold_it == labels.end()) {
            throw DataError("gold label '" + ex.gold + "' not in the label set");
        }
        item.gold = static_cast<std::size_t>(gold_it - labels.begin());
        item.scores = classifier.score(ex.id, ex.context, ex.question);
        if (item.scores.size() != labels.size()) {
            throw ContractError("classifier returned " + std::to_string(item.scores.size()) +
                                " scores for " + std::to_string(labels.size()) + " labels");
        }
        item.prediction = argmax_lowest(item.scores);
        report.confusion[item.gold][item.prediction] += 1;
        correct += item.prediction == item.gold ? 1 : 0;
        report.items.push_back(std::move(item));
    }
    report.n = examples.size();
    report.accuracy = report.n == 0 ? 0.0
                                    : static_cast<double>(correct) / static_cast<double>(report.n);
    return report;
}

std::string EvalReport::to_json(const std::string& tool_version,
                                const std::string& checkpoint_hash) const {
    nlohmann::ordered_json j;
    j["dataset_id"] = dataset_id;
    j["n"] = n;
    j["accuracy"] = accuracy;
    j["tool_version"] = tool_version;
    j["checkpoint_hash"] = checkpoint_hash;
    if (!labels.empty()) {
        j["labels"] = labels;
        j["confusion"] = confusion;
    }
    nlohmann::ordered_json items_json = nlohmann::ordered_json::array();
    for (const ItemResult& item : items) {
        nlohmann::ordered_json ij;
        ij["id"] = item.id;
        ij["prediction"] = item.prediction;
        ij["gold"] = item.gold;
        ij["scores"] = item.scores;
        items_json.push_back(std::move(ij));
    }
    j["items"] = items_json;
    return j.dump(2) + "\n";
}

Transcript generate_answers(AnswerGenerator& generator, const std::vector<GenExample>& examples,
                            const std::string& dataset_id, const std::string& decode_settings,
                            std::uint64_t seed) {
    Transcript t;
    t.dataset_id = dataset_id;
    t.decode_settings = decode_settings;
    t.seed = seed;
    for (const GenExample& ex : examples) {
        TranscriptEntry entry;
        entry.id = ex.id;
        entry.question = ex.question;
        entry.reference = ex.answer;
        entry.generated = generator.generate(ex.id, ex.question);
        t.entries.push_back(std::move(entry));
    }
    return t;
}

std::string Transcript::to_json(const std::string& tool_version,
                                const std::string& checkpoint_hash) const {
    nlohmann::ordered_json j;
    j["dataset_id"] = dataset_id;
    j["decode_settings"] = decode_settings;
    j["seed"] = seed;
    j["tool_version"] = tool_version;
    j["checkpoint_hash"] = checkpoint_hash;
    nlohmann::ordered_json entries_json = nlohmann::ordered_json::array();
    for (const TranscriptEntry& e : entries) {
        nlohmann::ordered_json ej;
        ej["id"] = e.id;
        ej["question"] = e.question;
        ej["reference"] = e.reference;
        ej["generated"] = e.generated;
        entries_json.push_back(std::move(ej));
    }
    j["entries"] = entries_json;
    // Byte-fallback vocabularies let a model emit invalid UTF-8; replace such
    // bytes rather than refuse to serialize the transcript.
    return j.dump(2, ' ', false, nlohmann::ordered_json::error_handler_t::replace) + "\n";
}

}  // namespace bmlm
