#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bmlm/checkpoint.hpp"
#include "bmlm/optimizer.hpp"
#include "bmlm/tokenizer.hpp"
#include "bmlm/transformer.hpp"

namespace bmlm {

struct PretrainConfig {
    std::size_t tokens_per_batch = 8192;
    std::size_t sequence_length = 128;
    std::size_t total_steps = 0;
    std::size_t eval_interval = 50;
    std::uint64_t seed = 0;

    void validate() const;
};

// Joins documents with the separator token (between documents only), then
// slices the stream into full sequence_length windows; the final partial
// window is dropped. A corpus shorter than one window packs to nothing.
std::vector<std::vector<TokenId>> pack_corpus(const std::vector<std::vector<TokenId>>& documents,
                                              TokenId separator, std::size_t sequence_length);

template <class S>
struct PretrainResult {
    Checkpoint<S> checkpoint;
    // Set when a non-finite loss or gradient appeared; the checkpoint is the
    // last state before the offending step.
    bool aborted = false;
    std::size_t aborted_at = 0;
};

// Next-token cross-entropy training. Resumes from checkpoint.step: window
// order is a pure function of (seed, pass), so a save/load splice at any
// step reproduces the uninterrupted trajectory bit-exactly.
template <class S>
PretrainResult<S> pretrain(Checkpoint<S> start, const std::vector<std::vector<TokenId>>& documents,
                           TokenId separator, const PretrainConfig& config,
                           const AdamWConfig& opt_config, const Schedule& schedule);

enum class TaskKind { multiple_choice, classification, generative };

struct FinetuneTask {
    TaskKind kind = TaskKind::multiple_choice;
    // Multiple files merge into one example list before shuffling.
    std::vector<std::filesystem::path> dataset_paths;
    std::size_t epochs = 1;
    // Constant fine-tuning learning rate; defaults to the optimizer peak_lr.
    std::optional<double> lr;
    // Generative only: restrict the next-token loss to answer tokens.
    bool mask_loss = true;
    // Classification only: label set in score order.
    std::vector<std::string> labels;
    std::uint64_t seed = 0;
};

template <class S>
struct FinetuneResult {
    Checkpoint<S> checkpoint;
    // Classification derives a tokenizer with [CTX]/[QST]/[ANS] appended;
    // other tasks return the input tokenizer unchanged.
    TokenizerModel tokenizer;
    std::vector<LossSample> curve;
};

template <class S>
FinetuneResult<S> finetune(Checkpoint<S> start, const TokenizerModel& tokenizer,
                           const FinetuneTask& task, const AdamWConfig& opt_config);

extern template struct PretrainResult<float>;
extern template struct PretrainResult<double>;
extern template PretrainResult<float> pretrain<float>(Checkpoint<float>,
                                                      const std::vector<std::vector<TokenId>>&,
                                                      TokenId, const PretrainConfig&,
                                                      const AdamWConfig&, const Schedule&);
extern template PretrainResult<double> pretrain<double>(Checkpoint<double>,
                                                        const std::vector<std::vector<TokenId>>&,
                                                        TokenId, const PretrainConfig&,
                                                        const AdamWConfig&, const Schedule&);
extern template FinetuneResult<float> finetune<float>(Checkpoint<float>, const TokenizerModel&,
                                                      const FinetuneTask&, const AdamWConfig&);
extern template FinetuneResult<double> finetune<double>(Checkpoint<double>, const TokenizerModel&,
                                                        const FinetuneTask&, const AdamWConfig&);

}  // namespace bmlm
