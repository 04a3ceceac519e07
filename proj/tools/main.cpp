// bmlm command-line tool: tokenizer training and inspection, language-model
// pre-training, task fine-tuning, evaluation, and generation as subcommands
// of one binary.
//
// Exit codes: 0 success, 1 data/validation error, 2 usage error. Diagnostics
// go to stderr; results go to --out or stdout. Every run that writes an
// output file also writes `<out>.manifest.json` recording the resolved
// configuration, the seed, and content hashes of every input, which is
// enough to reproduce the run bit-exactly.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bmlm/checkpoint.hpp"
#include "bmlm/errors.hpp"
#include "bmlm/hash.hpp"
#include "bmlm/io.hpp"
#include "bmlm/pipeline.hpp"
#include "bmlm/qa.hpp"
#include "bmlm/tokenizer.hpp"
#include "bmlm/transformer.hpp"
#include "bmlm/version.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string iso_utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Content hash of an input path. Directories hash (filename, bytes) pairs in
// name order, matching the document order used by read_documents.
std::string hash_path_hex(const fs::path& path) {
    bmlm::Fnv1a64 h;
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(path)) {
            if (entry.is_regular_file()) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end(),
                  [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
        for (const auto& f : files) {
            const std::string name = f.filename().string();
            h.update(name);
            h.update("\0", 1);
            h.update(bmlm::read_file(f));
        }
    } else {
        h.update(bmlm::read_file(path));
    }
    return bmlm::hash_hex(h.digest());
}

struct RunRecord {
    std::string subcommand;
    ordered_json config = ordered_json::object();
    std::uint64_t seed = 0;
    ordered_json inputs = ordered_json::object();
    std::string started = iso_utc_now();

    void input(const fs::path& path) { inputs[path.string()] = hash_path_hex(path); }

    void write(const fs::path& primary_output) const {
        ordered_json j;
        j["subcommand"] = subcommand;
        j["config"] = config;
        j["seed"] = seed;
        j["inputs"] = inputs;
        j["tool_version"] = std::string(bmlm::kVersion);
        j["started"] = started;
        j["finished"] = iso_utc_now();
        bmlm::write_file(primary_output.string() + ".manifest.json", j.dump(2) + "\n");
    }
};

// Sends `text` to --out when given (with a manifest), otherwise to stdout.
void emit(const std::string& out, const std::string& text, const RunRecord* record) {
    if (out.empty()) {
        std::cout << text;
        return;
    }
    bmlm::write_file(out, text);
    if (record != nullptr) record->write(out);
}

// --config accepts a flat JSON object whose keys are option names without
// dashes; explicit command-line flags win over config values. The option
// lives on the root command (CLI11 only processes the root config), so each
// item is routed to the subcommand that was actually invoked.
class JsonConfig : public CLI::Config {
public:
    explicit JsonConfig(const CLI::App* root) : root_(root) {}

    std::string to_config(const CLI::App*, bool, bool, std::string) const override {
        return "{}\n";
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        nlohmann::json data;
        try {
            data = nlohmann::json::parse(input);
        } catch (const nlohmann::json::exception& e) {
            throw CLI::FileError(std::string("config is not valid JSON: ") + e.what());
        }
        if (!data.is_object()) {
            throw CLI::FileError("config root must be a JSON object");
        }
        std::vector<std::string> parents;
        for (const CLI::App* a = root_; !a->get_subcommands().empty();) {
            a = a->get_subcommands().front();
            parents.push_back(a->get_name());
        }
        std::vector<CLI::ConfigItem> items;
        for (const auto& [key, value] : data.items()) {
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = key;
            if (value.is_array()) {
                for (const auto& v : value) item.inputs.push_back(scalar(v));
            } else {
                item.inputs.push_back(scalar(value));
            }
            items.push_back(std::move(item));
        }
        return items;
    }

private:
    static std::string scalar(const nlohmann::json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        if (v.is_number()) return v.dump();
        throw CLI::FileError("config values must be scalars or arrays of scalars");
    }

    const CLI::App* root_;
};

// Root-level flags (--config, --threads) may be written after the subcommand
// name; anything the subcommand does not recognize bubbles up to the root.
void enable_json_config(CLI::App* sub) { sub->fallthrough(); }

std::string dataset_stem(const fs::path& path) { return path.stem().string(); }

// Shared optimizer/schedule flags for the two training subcommands.
struct OptimizerFlags {
    double peak_lr = 1.6e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double epsilon = 1e-8;
    double weight_decay = 1.6e-5;
    double clip_norm = 0.0;
    bool decay_all = false;

    void add(CLI::App* sub) {
        sub->add_option("--peak-lr", peak_lr, "Peak learning rate");
        sub->add_option("--beta1", beta1, "Adam first-moment decay");
        sub->add_option("--beta2", beta2, "Adam second-moment decay");
        sub->add_option("--epsilon", epsilon, "Adam denominator epsilon");
        sub->add_option("--weight-decay", weight_decay, "Decoupled weight decay");
        sub->add_option("--clip-norm", clip_norm, "Global gradient-norm clip (0 disables)");
        sub->add_flag("--decay-all", decay_all,
                      "Apply weight decay to biases and norm gains too");
    }

    template <class S>
    bmlm::AdamWConfig build(const bmlm::Model<S>& model) const {
        bmlm::AdamWConfig config;
        config.peak_lr = peak_lr;
        config.beta1 = beta1;
        config.beta2 = beta2;
        config.epsilon = epsilon;
        config.weight_decay = weight_decay;
        config.clip_norm = clip_norm;
        if (!decay_all) {
            for (const auto& [name, tensor] : const_cast<bmlm::Model<S>&>(model).params()) {
                (void)tensor;
                if (name.ends_with(".bias") || name.ends_with(".gain") || name.ends_with(".b")) {
                    config.no_decay_names.insert(name);
                }
            }
            // The task head may be attached after this point; harmless if the
            // name never materializes.
            config.no_decay_names.insert("head.b");
        }
        return config;
    }

    ordered_json snapshot() const {
        return {{"peak_lr", peak_lr},
                {"beta1", beta1},
                {"beta2", beta2},
                {"epsilon", epsilon},
                {"weight_decay", weight_decay},
                {"clip_norm", clip_norm},
                {"decay_all", decay_all}};
    }
};

// ---------------------------------------------------------------- tokenizer

struct TokenizerTrainOpts {
    std::string corpus;
    std::string out;
    bmlm::TokenizerTrainConfig config;
};

void setup_tokenizer_train(CLI::App* sub, TokenizerTrainOpts& o) {
    enable_json_config(sub);
    o.config.special_tokens = {bmlm::kEndOfTextToken};
    sub->add_option("--corpus", o.corpus, "Training text: a file or a directory of files")
        ->required()
        ->check(CLI::ExistingPath);
    sub->add_option("--out", o.out, "Output tokenizer JSON path")->required();
    sub->add_option("--vocab-size", o.config.vocab_size, "Target vocabulary size");
    sub->add_option("--min-frequency", o.config.min_frequency,
                    "Smallest pair count a merge may be built from");
    sub->add_flag("--add-prefix-space", o.config.add_prefix_space,
                  "Pre-tokenize as if the text began with a space");
    sub->add_flag("--trim-offsets,!--no-trim-offsets", o.config.trim_offsets,
                  "Exclude the leading space from reported token offsets");
    sub->add_option("--special", o.config.special_tokens,
                    "Special token (repeatable; replaces the <|endoftext|> default)");
    sub->callback([&o]() {
        const auto documents = bmlm::read_documents(o.corpus);
        const auto model = bmlm::TokenizerModel::train(documents, o.config);
        model.save(o.out);

        RunRecord record{"tokenizer train"};
        record.config = {{"corpus", o.corpus},
                         {"vocab_size", o.config.vocab_size},
                         {"min_frequency", o.config.min_frequency},
                         {"add_prefix_space", o.config.add_prefix_space},
                         {"trim_offsets", o.config.trim_offsets},
                         {"special_tokens", o.config.special_tokens}};
        record.input(o.corpus);
        record.write(o.out);
        std::cerr << "trained " << model.vocab_size() << " tokens (" << model.merges().size()
                  << " merges) from " << documents.size() << " documents -> " << o.out << "\n";
    });
}

struct TokenizerEncodeOpts {
    std::string tokenizer;
    std::string text;
    std::string input;
    std::string out;
    bool offsets = false;
};

void setup_tokenizer_encode(CLI::App* sub, TokenizerEncodeOpts& o) {
    enable_json_config(sub);
    sub->add_option("--model,--tokenizer", o.tokenizer, "Tokenizer JSON path")
        ->required()
        ->check(CLI::ExistingFile);
    auto* text = sub->add_option("--text", o.text, "Text to encode");
    sub->add_option("--input", o.input, "File whose contents to encode")
        ->check(CLI::ExistingFile)
        ->excludes(text);
    sub->add_flag("--offsets", o.offsets, "Include byte offsets in the output");
    sub->add_option("--out", o.out, "Write the JSON result here instead of stdout");
    sub->callback([&o, text]() {
        const bool have_text = text->count() > 0;
        if (!have_text && o.input.empty()) {
            throw bmlm::UsageError("tokenizer encode needs --text or --input");
        }
        const auto model = bmlm::TokenizerModel::load(o.tokenizer);
        const std::string payload = have_text ? o.text : bmlm::read_file(o.input);
        const bmlm::Encoding encoding = model.encode(payload);

        ordered_json j;
        j["ids"] = encoding.ids;
        ordered_json tokens = ordered_json::array();
        for (bmlm::TokenId id : encoding.ids) {
            tokens.push_back(bmlm::escape_token_text(model.text_of(id)));
        }
        j["tokens"] = tokens;
        if (o.offsets) {
            ordered_json offs = ordered_json::array();
            for (const auto& [start, end] : encoding.offsets) {
                offs.push_back({start, end});
            }
            j["offsets"] = offs;
        }

        RunRecord record{"tokenizer encode"};
        record.config = {{"tokenizer", o.tokenizer}, {"offsets", o.offsets}};
        record.input(o.tokenizer);
        if (!o.input.empty()) record.input(o.input);
        emit(o.out, j.dump(2) + "\n", &record);
    });
}

struct TokenizerDecodeOpts {
    std::string tokenizer;
    std::vector<bmlm::TokenId> ids;
    std::string out;
};

void setup_tokenizer_decode(CLI::App* sub, TokenizerDecodeOpts& o) {
    enable_json_config(sub);
    sub->add_option("--model,--tokenizer", o.tokenizer, "Tokenizer JSON path")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--ids", o.ids, "Comma-separated token ids")->required()->delimiter(',');
    sub->add_option("--out", o.out, "Write the decoded bytes here instead of stdout");
    sub->callback([&o]() {
        const auto model = bmlm::TokenizerModel::load(o.tokenizer);
        RunRecord record{"tokenizer decode"};
        record.config = {{"tokenizer", o.tokenizer}, {"ids", o.ids}};
        record.input(o.tokenizer);
        emit(o.out, model.decode(o.ids), &record);
    });
}

struct TokenizerCompareOpts {
    std::string baseline;
    std::string domain;
    std::vector<std::string> terms;
    std::string terms_file;
    std::string out;
};

void setup_tokenizer_compare(CLI::App* sub, TokenizerCompareOpts& o) {
    enable_json_config(sub);
    sub->add_option("--a,--baseline", o.baseline, "Reference tokenizer JSON path")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--b,--domain", o.domain, "Tokenizer JSON path to compare against it")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--term", o.terms, "Term to fragment (repeatable, comma-separable)")
        ->delimiter(',');
    sub->add_option("--terms", o.terms_file, "File with one term per line")
        ->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Write the report here instead of stdout");
    sub->callback([&o]() {
        std::vector<std::string> terms = o.terms;
        if (!o.terms_file.empty()) {
            for (const std::string& line : bmlm::split_lines(bmlm::read_file(o.terms_file))) {
                if (!line.empty()) terms.push_back(line);
            }
        }
        const auto baseline = bmlm::TokenizerModel::load(o.baseline);
        const auto domain = bmlm::TokenizerModel::load(o.domain);
        const auto report = bmlm::compare_tokenizers(baseline, domain, terms);

        RunRecord record{"tokenizer compare"};
        record.config = {{"baseline", o.baseline}, {"domain", o.domain}, {"terms", terms}};
        record.input(o.baseline);
        record.input(o.domain);
        if (!o.terms_file.empty()) record.input(o.terms_file);
        emit(o.out, report.to_json(), &record);
    });
}

// ----------------------------------------------------------------- pretrain

struct PretrainOpts {
    std::string tokenizer;
    std::string corpus;
    std::string out;
    std::string resume;
    std::string curve;
    std::string preset = "desk";
    bmlm::ModelConfig dims;
    CLI::Option* dim_options[6] = {};
    bmlm::PretrainConfig train;
    OptimizerFlags opt;
    std::size_t warmup_steps = 100;
    std::size_t schedule_steps = 0;
    double floor_lr = 0.0;
};

void setup_pretrain(CLI::App* sub, PretrainOpts& o) {
    enable_json_config(sub);
    sub->add_option("--tokenizer", o.tokenizer, "Tokenizer JSON path")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--corpus", o.corpus, "Training text: a file or a directory of files")
        ->required()
        ->check(CLI::ExistingPath);
    sub->add_option("--out", o.out, "Output checkpoint path")->required();
    sub->add_option("--checkpoint", o.resume, "Resume from this checkpoint")
        ->check(CLI::ExistingFile);
    sub->add_option("--curve", o.curve, "Also write the loss curve JSON here");

    sub->add_option("--preset", o.preset, "Model size preset")
        ->check(CLI::IsMember({"desk", "paper"}));
    o.dim_options[0] = sub->add_option("--hidden-size", o.dims.hidden_size, "Residual width");
    o.dim_options[1] = sub->add_option("--heads", o.dims.heads, "Attention heads");
    o.dim_options[2] = sub->add_option("--layers", o.dims.layers, "Transformer layers");
    o.dim_options[3] = sub->add_option("--vocab-size", o.dims.vocab_size, "Model vocabulary");
    o.dim_options[4] = sub->add_option("--max-sequence", o.dims.max_sequence, "Context window");
    o.dim_options[5] = sub->add_option("--dropout", o.dims.dropout, "Dropout probability");

    sub->add_option("--tokens-per-batch", o.train.tokens_per_batch,
                    "Tokens per optimizer step (multiple of --sequence-length)");
    sub->add_option("--sequence-length", o.train.sequence_length, "Training window length");
    sub->add_option("--total-steps", o.train.total_steps, "Optimizer steps to run")->required();
    sub->add_option("--eval-interval", o.train.eval_interval, "Loss sampling interval");
    sub->add_option("--seed", o.train.seed, "Root seed for init, shuffling, and dropout");

    o.opt.add(sub);
    sub->add_option("--warmup-steps", o.warmup_steps, "Linear warmup length");
    sub->add_option("--schedule-steps", o.schedule_steps,
                    "Cosine horizon (defaults to --total-steps)");
    sub->add_option("--floor-lr", o.floor_lr, "Learning rate the cosine decays to");

    sub->callback([&o]() {
        const auto tokenizer = bmlm::TokenizerModel::load(o.tokenizer);
        const std::string tokenizer_hash = bmlm::hash_hex(tokenizer.content_hash());

        bool dims_given = false;
        for (const CLI::Option* opt : o.dim_options) {
            dims_given = dims_given || (opt != nullptr && opt->count() > 0);
        }

        std::optional<bmlm::Checkpoint<float>> ckpt;
        if (!o.resume.empty()) {
            if (dims_given) {
                std::cerr << "note: resuming; model shape flags are ignored\n";
            }
            ckpt.emplace(bmlm::load_checkpoint<float>(o.resume));
            if (ckpt->tokenizer_hash != tokenizer_hash) {
                throw bmlm::DataError("checkpoint tokenizer hash " + ckpt->tokenizer_hash +
                                      " does not match " + o.tokenizer + " (" + tokenizer_hash +
                                      ")");
            }
        } else {
            bmlm::ModelConfig config =
                o.preset == "paper" ? bmlm::ModelConfig::paper() : bmlm::ModelConfig::desk();
            const std::size_t given[] = {o.dims.hidden_size, o.dims.heads,    o.dims.layers,
                                         o.dims.vocab_size,  o.dims.max_sequence};
            std::size_t* fields[] = {&config.hidden_size, &config.heads, &config.layers,
                                     &config.vocab_size, &config.max_sequence};
            for (int i = 0; i < 5; ++i) {
                if (o.dim_options[i]->count() > 0) *fields[i] = given[i];
            }
            if (o.dim_options[5]->count() > 0) config.dropout = o.dims.dropout;
            if (tokenizer.vocab_size() > config.vocab_size) {
                throw bmlm::ConfigError("tokenizer has " + std::to_string(tokenizer.vocab_size()) +
                                        " tokens but the model vocabulary is only " +
                                        std::to_string(config.vocab_size));
            }
            ckpt.emplace(bmlm::Model<float>::init(config,
                                                  bmlm::derive_seed(o.train.seed, "init")));
            ckpt->tokenizer_hash = tokenizer_hash;
            ckpt->precision = bmlm::PrecisionPolicy::desk();
        }

        const std::optional<bmlm::TokenId> separator = tokenizer.find_id(bmlm::kEndOfTextToken);
        if (!separator) {
            throw bmlm::ConfigError(
                "the tokenizer has no <|endoftext|> special token to separate documents");
        }
        std::vector<std::vector<bmlm::TokenId>> documents;
        for (const std::string& text : bmlm::read_documents(o.corpus)) {
            documents.push_back(tokenizer.encode_ids(text));
        }

        const bmlm::AdamWConfig opt_config = o.opt.build(ckpt->model);
        const bmlm::Schedule schedule{o.warmup_steps,
                                      o.schedule_steps != 0 ? o.schedule_steps
                                                            : o.train.total_steps,
                                      o.floor_lr};

        auto result =
            bmlm::pretrain(std::move(*ckpt), documents, *separator, o.train, opt_config, schedule);
        bmlm::save_checkpoint(result.checkpoint, o.out);

        RunRecord record{"pretrain"};
        record.seed = o.train.seed;
        const bmlm::ModelConfig& mc = result.checkpoint.model.config();
        record.config = {{"model",
                          {{"hidden_size", mc.hidden_size},
                           {"heads", mc.heads},
                           {"layers", mc.layers},
                           {"vocab_size", mc.vocab_size},
                           {"max_sequence", mc.max_sequence},
                           {"dropout", mc.dropout}}},
                         {"tokens_per_batch", o.train.tokens_per_batch},
                         {"sequence_length", o.train.sequence_length},
                         {"total_steps", o.train.total_steps},
                         {"eval_interval", o.train.eval_interval},
                         {"optimizer", o.opt.snapshot()},
                         {"warmup_steps", o.warmup_steps},
                         {"schedule_steps", schedule.total_steps},
                         {"floor_lr", o.floor_lr},
                         {"resume", o.resume}};
        record.input(o.tokenizer);
        record.input(o.corpus);
        if (!o.resume.empty()) record.input(o.resume);
        record.write(o.out);

        if (!o.curve.empty()) {
            ordered_json curve = ordered_json::array();
            for (const auto& sample : result.checkpoint.loss_curve) {
                curve.push_back({{"step", sample.step}, {"loss", sample.loss}});
            }
            bmlm::write_file(o.curve, curve.dump(2) + "\n");
        }

        if (!result.checkpoint.loss_curve.empty()) {
            const auto& last = result.checkpoint.loss_curve.back();
            std::cerr << "step " << result.checkpoint.step << " loss " << last.loss << " -> "
                      << o.out << "\n";
        }
        if (result.aborted) {
            throw bmlm::DomainError("pre-training aborted at step " +
                                    std::to_string(result.aborted_at) +
                                    " on a non-finite value; last good state saved to " + o.out);
        }
    });
}

// ----------------------------------------------------------------- finetune

struct FinetuneOpts {
    std::string checkpoint;
    std::string tokenizer;
    std::string out;
    std::string tokenizer_out;
    bmlm::FinetuneTask task;
    double lr = 0.0;
    CLI::Option* lr_option = nullptr;
    OptimizerFlags opt;
};

void setup_finetune(CLI::App* sub, FinetuneOpts& o) {
    enable_json_config(sub);
    sub->add_option("--checkpoint", o.checkpoint, "Starting checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--tokenizer", o.tokenizer, "Tokenizer JSON path")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Output checkpoint path")->required();
    sub->add_option("--task", o.task.kind, "Task architecture")
        ->required()
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, bmlm::TaskKind>{
                {"mcq", bmlm::TaskKind::multiple_choice},
                {"cls", bmlm::TaskKind::classification},
                {"gen", bmlm::TaskKind::generative}},
            CLI::ignore_case));
    sub->add_option("--dataset", o.task.dataset_paths, "Training JSONL (repeatable; merged)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--epochs", o.task.epochs, "Passes over the merged dataset");
    o.lr_option = sub->add_option("--lr", o.lr, "Constant fine-tuning learning rate");
    sub->add_option("--labels", o.task.labels, "Classification label set, comma-separated")
        ->delimiter(',');
    sub->add_flag("--mask-loss,!--no-mask-loss", o.task.mask_loss,
                  "Generative: restrict the loss to answer tokens");
    sub->add_option("--seed", o.task.seed, "Root seed for shuffling and head init");
    sub->add_option("--tokenizer-out", o.tokenizer_out,
                    "Where classification writes its derived tokenizer");
    o.opt.add(sub);

    sub->callback([&o]() {
        const auto tokenizer = bmlm::TokenizerModel::load(o.tokenizer);
        auto ckpt = bmlm::load_checkpoint<float>(o.checkpoint);
        const std::string tokenizer_hash = bmlm::hash_hex(tokenizer.content_hash());
        if (ckpt.tokenizer_hash != tokenizer_hash) {
            throw bmlm::DataError("checkpoint tokenizer hash " + ckpt.tokenizer_hash +
                                  " does not match " + o.tokenizer + " (" + tokenizer_hash + ")");
        }
        if (o.task.kind == bmlm::TaskKind::classification && o.task.labels.empty()) {
            o.task.labels = {"yes", "no"};
        }
        if (o.lr_option->count() > 0) o.task.lr = o.lr;

        const bmlm::AdamWConfig opt_config = o.opt.build(ckpt.model);
        auto result = bmlm::finetune(std::move(ckpt), tokenizer, o.task, opt_config);
        bmlm::save_checkpoint(result.checkpoint, o.out);

        std::string derived_path;
        if (o.task.kind == bmlm::TaskKind::classification) {
            derived_path = o.tokenizer_out.empty() ? o.out + ".tokenizer.json" : o.tokenizer_out;
            result.tokenizer.save(derived_path);
        }

        RunRecord record{"finetune"};
        record.seed = o.task.seed;
        const char* kind = o.task.kind == bmlm::TaskKind::multiple_choice ? "mcq"
                           : o.task.kind == bmlm::TaskKind::classification ? "cls"
                                                                           : "gen";
        std::vector<std::string> datasets;
        for (const auto& p : o.task.dataset_paths) datasets.push_back(p.string());
        record.config = {{"task", kind},
                         {"datasets", datasets},
                         {"epochs", o.task.epochs},
                         {"lr", o.task.lr ? ordered_json(*o.task.lr) : ordered_json(nullptr)},
                         {"mask_loss", o.task.mask_loss},
                         {"labels", o.task.labels},
                         {"optimizer", o.opt.snapshot()},
                         {"derived_tokenizer", derived_path}};
        record.input(o.checkpoint);
        record.input(o.tokenizer);
        for (const auto& p : o.task.dataset_paths) record.input(p);
        record.write(o.out);

        if (!result.curve.empty()) {
            std::cerr << "epoch " << o.task.epochs << " mean loss " << result.curve.back().loss
                      << " -> " << o.out << "\n";
        }
    });
}

// --------------------------------------------------------------------- eval

struct EvalOpts {
    std::string task = "mcq";
    std::string dataset;
    std::string model = "oracle";
    std::size_t constant_index = 0;
    std::string checkpoint;
    std::string tokenizer;
    std::vector<std::string> labels;
    bool strict = true;
    std::string out;
};

void warn_skipped(const std::vector<std::pair<std::size_t, std::string>>& skipped) {
    for (const auto& [line, reason] : skipped) {
        std::cerr << "skipped line " << line << ": " << reason << "\n";
    }
}

void setup_eval(CLI::App* sub, EvalOpts& o) {
    enable_json_config(sub);
    sub->add_option("--task", o.task, "Evaluation task")
        ->required()
        ->check(CLI::IsMember({"mcq", "cls"}));
    sub->add_option("--dataset", o.dataset, "Evaluation JSONL path")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--model", o.model,
                    "Scoring backend: a fine-tuned checkpoint, the gold-echoing oracle "
                    "(harness self-test only), or a constant predictor")
        ->check(CLI::IsMember({"oracle", "constant", "checkpoint"}));
    sub->add_option("--constant-index", o.constant_index,
                    "Option/label index the constant backend always picks");
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint for --model checkpoint")
        ->check(CLI::ExistingFile);
    sub->add_option("--tokenizer", o.tokenizer, "Tokenizer for --model checkpoint")
        ->check(CLI::ExistingFile);
    sub->add_option("--labels", o.labels, "Classification label set, comma-separated")
        ->delimiter(',');
    sub->add_flag("--strict,!--permissive", o.strict,
                  "Fail on the first bad record instead of skipping it");
    sub->add_option("--out", o.out, "Write the report here instead of stdout");

    sub->callback([&o]() {
        std::optional<bmlm::Checkpoint<float>> ckpt;
        std::optional<bmlm::TokenizerModel> tokenizer;
        std::string checkpoint_hash;
        if (o.model == "checkpoint") {
            if (o.checkpoint.empty() || o.tokenizer.empty()) {
                throw bmlm::UsageError("--model checkpoint needs --checkpoint and --tokenizer");
            }
            ckpt.emplace(bmlm::load_checkpoint<float>(o.checkpoint));
            tokenizer.emplace(bmlm::TokenizerModel::load(o.tokenizer));
            checkpoint_hash = bmlm::hash_hex(bmlm::checkpoint_file_hash(o.checkpoint));
            const std::string tokenizer_hash = bmlm::hash_hex(tokenizer->content_hash());
            if (ckpt->tokenizer_hash != tokenizer_hash) {
                throw bmlm::DataError("checkpoint tokenizer hash " + ckpt->tokenizer_hash +
                                      " does not match " + o.tokenizer + " (" + tokenizer_hash +
                                      ")");
            }
        }

        bmlm::EvalReport report;
        if (o.task == "mcq") {
            auto loaded = bmlm::load_mcq(o.dataset, o.strict);
            warn_skipped(loaded.skipped);
            if (loaded.examples.empty()) {
                throw bmlm::InputError("dataset has no usable examples");
            }
            std::unique_ptr<bmlm::OptionScorer> scorer;
            if (o.model == "oracle") {
                std::unordered_map<std::string, std::size_t> golds;
                for (const auto& ex : loaded.examples) golds[ex.id] = ex.gold;
                scorer = std::make_unique<bmlm::OracleOptionScorer>(std::move(golds));
            } else if (o.model == "constant") {
                scorer = std::make_unique<bmlm::ConstantOptionScorer>(o.constant_index);
            } else {
                if (!ckpt->model.head() ||
                    ckpt->model.head()->kind != bmlm::HeadKind::option_scorer) {
                    throw bmlm::ConfigError(
                        "checkpoint has no option-scoring head; fine-tune with --task mcq first");
                }
                scorer = std::make_unique<bmlm::ModelOptionScorer>(ckpt->model, *tokenizer);
            }
            report = bmlm::evaluate_mcq(*scorer, loaded.examples, dataset_stem(o.dataset));
        } else {
            std::vector<std::string> labels = o.labels;
            if (labels.empty() && ckpt && !ckpt->labels.empty()) labels = ckpt->labels;
            if (labels.empty()) labels = {"yes", "no"};
            if (ckpt && ckpt->model.head() &&
                ckpt->model.head()->kind == bmlm::HeadKind::classifier &&
                ckpt->model.head()->num_labels != labels.size()) {
                throw bmlm::ConfigError("label set size does not match the classifier head");
            }
            auto loaded = bmlm::load_cls(o.dataset, labels, o.strict);
            warn_skipped(loaded.skipped);
            if (loaded.examples.empty()) {
                throw bmlm::InputError("dataset has no usable examples");
            }
            std::unique_ptr<bmlm::SequenceClassifier> classifier;
            if (o.model == "oracle") {
                std::unordered_map<std::string, std::size_t> golds;
                for (const auto& ex : loaded.examples) {
                    const auto it = std::find(labels.begin(), labels.end(), ex.gold);
                    golds[ex.id] = static_cast<std::size_t>(it - labels.begin());
                }
                classifier = std::make_unique<bmlm::OracleSequenceClassifier>(std::move(golds),
                                                                              labels.size());
            } else if (o.model == "constant") {
                classifier = std::make_unique<bmlm::ConstantSequenceClassifier>(o.constant_index,
                                                                                labels.size());
            } else {
                if (!ckpt->model.head() ||
                    ckpt->model.head()->kind != bmlm::HeadKind::classifier) {
                    throw bmlm::ConfigError(
                        "checkpoint has no classifier head; fine-tune with --task cls first");
                }
                classifier =
                    std::make_unique<bmlm::ModelSequenceClassifier>(ckpt->model, *tokenizer);
            }
            report = bmlm::evaluate_cls(*classifier, loaded.examples, labels,
                                        dataset_stem(o.dataset));
        }

        RunRecord record{"eval"};
        record.config = {{"task", o.task},
                         {"dataset", o.dataset},
                         {"model", o.model},
                         {"constant_index", o.constant_index},
                         {"labels", o.labels},
                         {"strict", o.strict}};
        record.input(o.dataset);
        if (!o.checkpoint.empty()) record.input(o.checkpoint);
        if (!o.tokenizer.empty()) record.input(o.tokenizer);
        emit(o.out, report.to_json(std::string(bmlm::kVersion), checkpoint_hash), &record);
        std::cerr << "accuracy " << report.accuracy << " on " << report.n << " examples\n";
    });
}

// ----------------------------------------------------------------- generate

struct GenerateOpts {
    std::string checkpoint;
    std::string tokenizer;
    std::string prompt;
    std::string dataset;
    std::string out;
    std::size_t max_new = 32;
    double temperature = 1.0;
    std::size_t top_k = 0;
    std::uint64_t seed = 0;
    std::string stop = bmlm::kEndOfTextToken;
    bool strict = true;
    CLI::Option* temperature_option = nullptr;
    CLI::Option* top_k_option = nullptr;
};

void setup_generate(CLI::App* sub, GenerateOpts& o) {
    enable_json_config(sub);
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint to decode from")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--tokenizer", o.tokenizer, "Tokenizer JSON path")
        ->required()
        ->check(CLI::ExistingFile);
    auto* prompt = sub->add_option("--prompt", o.prompt, "Single prompt to complete");
    sub->add_option("--dataset", o.dataset, "Generative JSONL to answer (writes a transcript)")
        ->check(CLI::ExistingFile)
        ->excludes(prompt);
    sub->add_option("--max-new", o.max_new, "Maximum new tokens per completion");
    o.temperature_option =
        sub->add_option("--temperature", o.temperature, "Sampling temperature (enables sampling)");
    o.top_k_option =
        sub->add_option("--top-k", o.top_k, "Sample from the k best tokens (enables sampling)");
    sub->add_option("--seed", o.seed, "Sampling seed");
    sub->add_option("--stop", o.stop, "Stop-token text (empty disables)");
    sub->add_flag("--strict,!--permissive", o.strict,
                  "Fail on the first bad record instead of skipping it");
    sub->add_option("--out", o.out, "Write the result here instead of stdout");

    sub->callback([&o, prompt]() {
        const bool have_prompt = prompt->count() > 0;
        if (!have_prompt && o.dataset.empty()) {
            throw bmlm::UsageError("generate needs --prompt or --dataset");
        }
        const auto tokenizer = bmlm::TokenizerModel::load(o.tokenizer);
        const auto ckpt = bmlm::load_checkpoint<float>(o.checkpoint);
        const std::string tokenizer_hash = bmlm::hash_hex(tokenizer.content_hash());
        if (ckpt.tokenizer_hash != tokenizer_hash) {
            throw bmlm::DataError("checkpoint tokenizer hash " + ckpt.tokenizer_hash +
                                  " does not match " + o.tokenizer + " (" + tokenizer_hash + ")");
        }

        bmlm::GenerateStrategy strategy;
        strategy.greedy = o.temperature_option->count() == 0 && o.top_k_option->count() == 0;
        strategy.temperature = o.temperature;
        strategy.top_k = o.top_k;
        strategy.seed = bmlm::derive_seed(o.seed, "generate");
        std::string settings = strategy.greedy ? "greedy"
                                               : "temperature=" + std::to_string(o.temperature) +
                                                     ",top_k=" + std::to_string(o.top_k);

        RunRecord record{"generate"};
        record.seed = o.seed;
        record.config = {{"max_new", o.max_new},
                         {"decode", settings},
                         {"stop", o.stop},
                         {"strict", o.strict}};
        record.input(o.checkpoint);
        record.input(o.tokenizer);

        if (have_prompt) {
            const std::vector<bmlm::TokenId> ids = tokenizer.encode_ids(o.prompt);
            if (ids.empty()) {
                throw bmlm::UsageError("--prompt must encode to at least one token");
            }
            const std::optional<bmlm::TokenId> stop =
                o.stop.empty() ? std::nullopt : tokenizer.find_id(o.stop);
            const std::vector<bmlm::TokenId> full =
                ckpt.model.generate(ids, strategy, o.max_new, stop);
            const std::vector<bmlm::TokenId> continuation(full.begin() + ids.size(), full.end());
            std::string text = tokenizer.decode(continuation);
            if (o.out.empty()) text += "\n";
            emit(o.out, text, &record);
        } else {
            auto loaded = bmlm::load_gen(o.dataset, o.strict);
            warn_skipped(loaded.skipped);
            if (loaded.examples.empty()) {
                throw bmlm::InputError("dataset has no usable examples");
            }
            record.input(o.dataset);
            bmlm::ModelAnswerGenerator generator(ckpt.model, tokenizer, strategy, o.max_new);
            const bmlm::Transcript transcript = bmlm::generate_answers(
                generator, loaded.examples, dataset_stem(o.dataset), settings, o.seed);
            const std::string checkpoint_hash =
                bmlm::hash_hex(bmlm::checkpoint_file_hash(o.checkpoint));
            emit(o.out, transcript.to_json(std::string(bmlm::kVersion), checkpoint_hash),
                 &record);
        }
    });
}

// ------------------------------------------------------------------ inspect

struct InspectOpts {
    std::string checkpoint;
    std::string tokenizer;
    std::string out;
};

void setup_inspect(CLI::App* sub, InspectOpts& o) {
    enable_json_config(sub);
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint to describe")
        ->check(CLI::ExistingFile);
    sub->add_option("--tokenizer", o.tokenizer, "Tokenizer to describe")
        ->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Write the JSON here instead of stdout");
    sub->callback([&o]() {
        if (o.checkpoint.empty() && o.tokenizer.empty()) {
            throw bmlm::UsageError("inspect needs --checkpoint and/or --tokenizer");
        }
        ordered_json j;
        if (!o.checkpoint.empty()) {
            const ordered_json manifest =
                ordered_json::parse(bmlm::checkpoint_manifest(o.checkpoint));
            std::uint64_t parameters = 0;
            for (const auto& tensor : manifest.at("tensors")) {
                const std::string name = tensor.at("name").get<std::string>();
                if (name.rfind("opt.", 0) == 0) continue;
                std::uint64_t n = 1;
                for (const auto& dim : tensor.at("shape")) n *= dim.get<std::uint64_t>();
                parameters += n;
            }
            ordered_json entry;
            entry["path"] = o.checkpoint;
            entry["file_hash"] = bmlm::hash_hex(bmlm::checkpoint_file_hash(o.checkpoint));
            entry["parameter_count"] = parameters;
            entry["manifest"] = manifest;
            j["checkpoint"] = entry;
        }
        if (!o.tokenizer.empty()) {
            const auto model = bmlm::TokenizerModel::load(o.tokenizer);
            ordered_json entry;
            entry["path"] = o.tokenizer;
            entry["vocab_size"] = model.vocab_size();
            entry["merge_count"] = model.merges().size();
            ordered_json specials = ordered_json::array();
            for (const std::string& s : model.specials()) {
                specials.push_back(bmlm::escape_token_text(s));
            }
            entry["specials"] = specials;
            entry["content_hash"] = bmlm::hash_hex(model.content_hash());
            entry["add_prefix_space"] = model.config().add_prefix_space;
            entry["trim_offsets"] = model.config().trim_offsets;
            j["tokenizer"] = entry;
        }
        emit(o.out, j.dump(2) + "\n", nullptr);
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"BPE tokenizer, GPT-style pre-training, fine-tuning, and QA evaluation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(bmlm::kVersion));
    app.config_formatter(std::make_shared<JsonConfig>(&app));
    app.set_config("--config", "", "JSON file with defaults for the invoked subcommand")
        ->check(CLI::ExistingFile);
    int threads = 1;
    app.add_option("--threads", threads,
                   "Data-loading worker count; never affects results (training is "
                   "single-threaded for determinism)")
        ->check(CLI::PositiveNumber);

    auto* tokenizer = app.add_subcommand("tokenizer", "Train, run, and compare BPE tokenizers");
    tokenizer->require_subcommand(1);
    tokenizer->fallthrough();
    TokenizerTrainOpts tokenizer_train;
    setup_tokenizer_train(tokenizer->add_subcommand("train", "Train a BPE tokenizer"),
                          tokenizer_train);
    TokenizerEncodeOpts tokenizer_encode;
    setup_tokenizer_encode(tokenizer->add_subcommand("encode", "Encode text to token ids"),
                           tokenizer_encode);
    TokenizerDecodeOpts tokenizer_decode;
    setup_tokenizer_decode(tokenizer->add_subcommand("decode", "Decode token ids to text"),
                           tokenizer_decode);
    TokenizerCompareOpts tokenizer_compare;
    setup_tokenizer_compare(
        tokenizer->add_subcommand("compare", "Fragmentation report for two tokenizers"),
        tokenizer_compare);

    PretrainOpts pretrain;
    setup_pretrain(app.add_subcommand("pretrain", "Next-token pre-training"), pretrain);
    FinetuneOpts finetune;
    setup_finetune(app.add_subcommand("finetune", "Task fine-tuning (mcq, cls, gen)"), finetune);
    EvalOpts eval;
    setup_eval(app.add_subcommand("eval", "Score a dataset and report accuracy"), eval);
    GenerateOpts generate;
    setup_generate(app.add_subcommand("generate", "Decode completions from a checkpoint"),
                   generate);
    InspectOpts inspect;
    setup_inspect(app.add_subcommand("inspect", "Dump checkpoint/tokenizer metadata"), inspect);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    } catch (const bmlm::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const bmlm::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
