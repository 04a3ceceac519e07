#include "bmlm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "bmlm/autodiff.hpp"
#include "bmlm/errors.hpp"
#include "bmlm/hash.hpp"
#include "bmlm/qa.hpp"
#include "bmlm/rng.hpp"

namespace bmlm {

void PretrainConfig::validate() const {
    if (sequence_length < 2) {
        throw ConfigError("sequence_length must be at least 2");
    }
    if (tokens_per_batch == 0 || tokens_per_batch % sequence_length != 0) {
        throw ConfigError("tokens_per_batch must be a positive multiple of sequence_length");
    }
    if (eval_interval == 0) {
        throw ConfigError("eval_interval must be positive");
    }
}

std::vector<std::vector<TokenId>> pack_corpus(const std::vector<std::vector<TokenId>>& documents,
                                              TokenId separator, std::size_t sequence_length) {
    if (sequence_length < 2) {
        throw ConfigError("sequence_length must be at least 2");
    }
    if (documents.empty()) {
        throw InputError("cannot pack an empty corpus");
    }
    std::vector<TokenId> stream;
    for (std::size_t d = 0; d < documents.size(); ++d) {
        if (d > 0) {
            stream.push_back(separator);
        }
        stream.insert(stream.end(), documents[d].begin(), documents[d].end());
    }
    std::vector<std::vector<TokenId>> windows;
    for (std::size_t off = 0; off + sequence_length <= stream.size(); off += sequence_length) {
        windows.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(off),
                             stream.begin() + static_cast<std::ptrdiff_t>(off + sequence_length));
    }
    return windows;
}

namespace {

// Deterministic window supplier. Each full pass over the corpus gets its own
// shuffle seeded from (seed, "data", pass), so position k in the global window
// stream is independent of where training started or resumed.
class WindowStream {
public:
    WindowStream(const std::vector<std::vector<TokenId>>& windows, std::uint64_t seed)
        : windows_(windows), seed_(seed), order_(windows.size()) {}

    const std::vector<TokenId>& at(std::size_t global_index) {
        const std::size_t pass = global_index / windows_.size();
        if (!have_pass_ || pass != pass_) {
            std::iota(order_.begin(), order_.end(), std::size_t{0});
            Rng rng(derive_seed(seed_, "data", pass));
            rng.shuffle(order_);
            pass_ = pass;
            have_pass_ = true;
        }
        return windows_[order_[global_index % windows_.size()]];
    }

private:
    const std::vector<std::vector<TokenId>>& windows_;
    std::uint64_t seed_;
    std::vector<std::size_t> order_;
    std::size_t pass_ = 0;
    bool have_pass_ = false;
};

}  // namespace

template <class S>
PretrainResult<S> pretrain(Checkpoint<S> start, const std::vector<std::vector<TokenId>>& documents,
                           TokenId separator, const PretrainConfig& config,
                           const AdamWConfig& opt_config, const Schedule& schedule) {
    config.validate();
    PretrainResult<S> result{std::move(start), false, 0};
    if (config.total_steps == 0) {
        return result;
    }
    opt_config.validate();
    schedule.validate(opt_config);
    if (schedule.total_steps < config.total_steps) {
        throw ConfigError("schedule covers fewer steps than the training run");
    }

    Checkpoint<S>& ckpt = result.checkpoint;
    Model<S>& model = ckpt.model;
    const std::size_t seq_len = config.sequence_length;
    if (seq_len > model.config().max_sequence) {
        throw ConfigError("sequence_length exceeds the model context window");
    }
    if (ckpt.step >= config.total_steps) {
        return result;
    }

    const auto windows = pack_corpus(documents, separator, seq_len);
    if (windows.empty()) {
        throw InputError("corpus packs to zero full windows at this sequence length");
    }
    for (const auto& window : windows) {
        for (TokenId id : window) {
            if (id >= model.config().vocab_size) {
                throw DomainError("corpus token id " + std::to_string(id) +
                                  " is out of range for the model vocabulary");
            }
        }
    }

    if (!ckpt.optimizer) {
        ckpt.optimizer.emplace(opt_config);
    }
    AdamW<S>& opt = *ckpt.optimizer;

    WindowStream stream(windows, config.seed);
    const std::size_t windows_per_step = config.tokens_per_batch / seq_len;
    const std::vector<std::uint8_t> full_mask(seq_len, 1);
    const bool use_dropout = model.config().dropout > 0.0;

    for (std::size_t step = ckpt.step + 1; step <= config.total_steps; ++step) {
        Tape<S> tape;
        const GraphParams params = model.register_params(tape);
        Rng dropout_rng(derive_seed(config.seed, "dropout", step));
        Rng* dropout = use_dropout ? &dropout_rng : nullptr;

        std::optional<Var> total;
        for (std::size_t b = 0; b < windows_per_step; ++b) {
            const std::vector<TokenId>& window = stream.at((step - 1) * windows_per_step + b);
            Var hidden = model.hidden_graph(tape, params, window, full_mask, dropout);
            Var logits = model.lm_logits_graph(tape, params, hidden);
            Var predictions = ops::slice_rows(tape, logits, 0, seq_len - 1);
            std::vector<std::size_t> targets(window.begin() + 1, window.end());
            Var window_loss = ops::cross_entropy(tape, predictions, targets);
            total = total ? ops::add(tape, *total, window_loss) : window_loss;
        }
        Var loss = windows_per_step > 1 ? ops::scale(tape, *total, 1.0 / windows_per_step) : *total;

        const double loss_value = static_cast<double>(tape.value(loss).item());
        if (!std::isfinite(loss_value)) {
            result.aborted = true;
            result.aborted_at = step;
            break;
        }

        tape.backward(loss);
        auto refs = model.param_refs(tape, params);
        try {
            opt.step(refs, lr_at(step, schedule, opt_config));
        } catch (const DomainError&) {
            // Parameters and moments were left untouched; surface the last
            // good state rather than poisoning the checkpoint.
            result.aborted = true;
            result.aborted_at = step;
            break;
        }

        ckpt.step = step;
        if (step == 1 || step % config.eval_interval == 0 || step == config.total_steps) {
            ckpt.loss_curve.push_back({step, loss_value});
        }
    }
    return result;
}

namespace {

template <class S>
struct FinetuneLoop {
    Model<S>& model;
    AdamW<S>& opt;
    Checkpoint<S>& ckpt;
    std::vector<LossSample>& curve;
    const FinetuneTask& task;
    double lr = 0.0;

    // Runs `epochs` shuffled passes; `step_loss` builds the per-example graph
    // and returns the loss node.
    template <class StepFn>
    void run(std::size_t example_count, StepFn&& step_loss) {
        const bool use_dropout = model.config().dropout > 0.0;
        std::vector<std::size_t> order(example_count);
        for (std::size_t epoch = 0; epoch < task.epochs; ++epoch) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            Rng shuffle_rng(derive_seed(task.seed, "finetune", epoch));
            shuffle_rng.shuffle(order);

            double epoch_sum = 0.0;
            for (std::size_t index : order) {
                Tape<S> tape;
                const GraphParams params = model.register_params(tape);
                Rng dropout_rng(derive_seed(task.seed, "dropout", ckpt.step + 1));
                Rng* dropout = use_dropout ? &dropout_rng : nullptr;
                Var loss = step_loss(tape, params, index, dropout);
                epoch_sum += static_cast<double>(tape.value(loss).item());
                tape.backward(loss);
                auto refs = model.param_refs(tape, params);
                opt.step(refs, lr);
                ckpt.step += 1;
            }
            curve.push_back({ckpt.step, epoch_sum / static_cast<double>(example_count)});
        }
        ckpt.loss_curve.insert(ckpt.loss_curve.end(), curve.begin(), curve.end());
    }
};

template <class S>
void finetune_multiple_choice(FinetuneLoop<S>& loop, const std::vector<McqExample>& examples,
                              const TokenizerModel& tokenizer) {
    struct Prepared {
        std::vector<std::vector<TokenId>> sequences;
        std::size_t gold;
    };
    std::vector<Prepared> prepared;
    prepared.reserve(examples.size());
    for (const auto& example : examples) {
        const McqPrompt prompt = build_mcq_prompt(tokenizer, example.question, example.options);
        Prepared item;
        item.gold = example.gold;
        for (const auto& option_ids : prompt.options) {
            item.sequences.push_back(loop.model.option_sequence(prompt.question, option_ids));
        }
        prepared.push_back(std::move(item));
    }

    loop.run(prepared.size(), [&](Tape<S>& tape, const GraphParams& params, std::size_t index,
                                  Rng* dropout) {
        const Prepared& item = prepared[index];
        std::vector<Var> scores;
        scores.reserve(item.sequences.size());
        for (const auto& sequence : item.sequences) {
            const std::vector<std::uint8_t> mask(sequence.size(), 1);
            Var hidden = loop.model.hidden_graph(tape, params, sequence, mask, dropout);
            scores.push_back(
                loop.model.head_scores_graph(tape, params, hidden, sequence.size() - 1));
        }
        Var all = ops::concat_cols(tape, scores);
        return ops::cross_entropy(tape, all, {item.gold});
    });
}

template <class S>
void finetune_classification(FinetuneLoop<S>& loop, const std::vector<ClsExample>& examples,
                             const TokenizerModel& tokenizer,
                             const std::vector<std::string>& labels) {
    const ClsMarkers markers = cls_markers(tokenizer);
    struct Prepared {
        std::vector<TokenId> sequence;
        std::size_t gold;
    };
    std::vector<Prepared> prepared;
    prepared.reserve(examples.size());
    for (const auto& example : examples) {
        const auto gold_it = std::find(labels.begin(), labels.end(), example.gold);
        if (gold_it == labels.end()) {
            throw DataError("example '" + example.id + "' has gold label outside the task set");
        }
        Prepared item;
        item.gold = static_cast<std::size_t>(gold_it - labels.begin());
        item.sequence = loop.model.classifier_sequence(tokenizer.encode_ids(example.context),
                                                       tokenizer.encode_ids(example.question),
                                                       markers);
        prepared.push_back(std::move(item));
    }

    loop.run(prepared.size(), [&](Tape<S>& tape, const GraphParams& params, std::size_t index,
                                  Rng* dropout) {
        const Prepared& item = prepared[index];
        const std::vector<std::uint8_t> mask(item.sequence.size(), 1);
        Var hidden = loop.model.hidden_graph(tape, params, item.sequence, mask, dropout);
        Var scores = loop.model.head_scores_graph(tape, params, hidden, item.sequence.size() - 1);
        return ops::cross_entropy(tape, scores, {item.gold});
    });
}

template <class S>
void finetune_generative(FinetuneLoop<S>& loop, const std::vector<GenExample>& examples,
                         const TokenizerModel& tokenizer, bool mask_loss) {
    const std::optional<TokenId> eot = tokenizer.find_id(kEndOfTextToken);
    if (!eot) {
        throw ConfigError("generative fine-tuning requires the end-of-text special token");
    }
    struct Prepared {
        std::vector<TokenId> sequence;
        std::size_t question_len;
    };
    std::vector<Prepared> prepared;
    prepared.reserve(examples.size());
    for (const auto& example : examples) {
        Prepared item;
        item.sequence = tokenizer.encode_ids(example.question);
        item.question_len = item.sequence.size();
        const std::vector<TokenId> answer = tokenizer.encode_ids(example.answer);
        item.sequence.insert(item.sequence.end(), answer.begin(), answer.end());
        item.sequence.push_back(*eot);
        if (item.sequence.size() < 2) {
            throw DataError("example '" + example.id + "' encodes to fewer than two tokens");
        }
        if (item.sequence.size() > loop.model.config().max_sequence) {
            throw DataError("example '" + example.id + "' exceeds the model context window");
        }
        prepared.push_back(std::move(item));
    }

    loop.run(prepared.size(), [&](Tape<S>& tape, const GraphParams& params, std::size_t index,
                                  Rng* dropout) {
        const Prepared& item = prepared[index];
        const std::size_t len = item.sequence.size();
        const std::vector<std::uint8_t> mask(len, 1);
        Var hidden = loop.model.hidden_graph(tape, params, item.sequence, mask, dropout);
        Var logits = loop.model.lm_logits_graph(tape, params, hidden);
        Var predictions = ops::slice_rows(tape, logits, 0, len - 1);
        std::vector<std::size_t> targets(item.sequence.begin() + 1, item.sequence.end());
        std::vector<double> weights;
        if (mask_loss) {
            weights.resize(targets.size());
            for (std::size_t j = 0; j < targets.size(); ++j) {
                // Target j is sequence position j + 1; answer tokens (and the
                // trailing end-of-text) start where the question ends.
                weights[j] = (j + 1 >= item.question_len) ? 1.0 : 0.0;
            }
        }
        return ops::cross_entropy(tape, predictions, targets, weights);
    });
}

}  // namespace

template <class S>
FinetuneResult<S> finetune(Checkpoint<S> start, const TokenizerModel& tokenizer,
                           const FinetuneTask& task, const AdamWConfig& opt_config) {
    opt_config.validate();
    if (task.dataset_paths.empty()) {
        throw ConfigError("fine-tuning needs at least one dataset");
    }

    FinetuneResult<S> result{std::move(start), tokenizer, {}};
    Checkpoint<S>& ckpt = result.checkpoint;
    Model<S>& model = ckpt.model;

    // Fine-tuning always starts fresh optimizer state; pre-training moments
    // do not carry over.
    AdamW<S> opt(opt_config);
    FinetuneLoop<S> loop{model, opt, ckpt, result.curve, task,
                         task.lr.value_or(opt_config.peak_lr)};

    switch (task.kind) {
        case TaskKind::multiple_choice: {
            std::vector<McqExample> examples;
            for (const auto& path : task.dataset_paths) {
                auto loaded = load_mcq(path, /*strict=*/true);
                examples.insert(examples.end(), loaded.examples.begin(), loaded.examples.end());
            }
            if (examples.empty()) {
                throw InputError("multiple-choice datasets contain no examples");
            }
            const std::optional<HeadSpec>& head = model.head();
            if (!head || head->kind != HeadKind::option_scorer) {
                model.attach_head({HeadKind::option_scorer, 1}, derive_seed(task.seed, "head"));
                ckpt.labels.clear();
            }
            finetune_multiple_choice(loop, examples, tokenizer);
            break;
        }
        case TaskKind::classification: {
            if (task.labels.empty()) {
                throw ConfigError("classification fine-tuning needs a label set");
            }
            std::vector<ClsExample> examples;
            for (const auto& path : task.dataset_paths) {
                auto loaded = load_cls(path, task.labels, /*strict=*/true);
                examples.insert(examples.end(), loaded.examples.begin(), loaded.examples.end());
            }
            if (examples.empty()) {
                throw InputError("classification datasets contain no examples");
            }
            result.tokenizer =
                tokenizer.with_added_specials({kCtxToken, kQstToken, kAnsToken});
            if (result.tokenizer.vocab_size() > model.config().vocab_size) {
                model.extend_vocab(result.tokenizer.vocab_size());
            }
            ckpt.tokenizer_hash = hash_hex(result.tokenizer.content_hash());
            const std::optional<HeadSpec>& head = model.head();
            const bool reuse = head && head->kind == HeadKind::classifier &&
                               head->num_labels == task.labels.size() &&
                               ckpt.labels == task.labels;
            if (!reuse) {
                model.attach_head({HeadKind::classifier, task.labels.size()},
                                  derive_seed(task.seed, "head"));
                ckpt.labels = task.labels;
            }
            finetune_classification(loop, examples, result.tokenizer, task.labels);
            break;
        }
        case TaskKind::generative: {
            std::vector<GenExample> examples;
            for (const auto& path : task.dataset_paths) {
                auto loaded = load_gen(path, /*strict=*/true);
                examples.insert(examples.end(), loaded.examples.begin(), loaded.examples.end());
            }
            if (examples.empty()) {
                throw InputError("generative datasets contain no examples");
            }
            // Generation reuses the tied language-model head; any previously
            // attached scoring head is ignored by the graph, not removed.
            finetune_generative(loop, examples, tokenizer, task.mask_loss);
            break;
        }
    }

    ckpt.optimizer = std::move(opt);
    return result;
}

template struct PretrainResult<float>;
template struct PretrainResult<double>;
template PretrainResult<float> pretrain<float>(Checkpoint<float>,
                                               const std::vector<std::vector<TokenId>>&, TokenId,
                                               const PretrainConfig&, const AdamWConfig&,
                                               const Schedule&);
template PretrainResult<double> pretrain<double>(Checkpoint<double>,
                                                 const std::vector<std::vector<TokenId>>&, TokenId,
                                                 const PretrainConfig&, const AdamWConfig&,
                                                 const Schedule&);
template FinetuneResult<float> finetune<float>(Checkpoint<float>, const TokenizerModel&,
                                               const FinetuneTask&, const AdamWConfig&);
template FinetuneResult<double> finetune<double>(Checkpoint<double>, const TokenizerModel&,
                                                 const FinetuneTask&, const AdamWConfig&);

}  // namespace bmlm
