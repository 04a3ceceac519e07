#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bmlm/autodiff.hpp"
#include "bmlm/optimizer.hpp"
#include "bmlm/rng.hpp"
#include "bmlm/tensor.hpp"
#include "bmlm/tokenizer.hpp"

namespace bmlm {

struct ModelConfig {
    std::size_t hidden_size = 0;
    std::size_t heads = 0;
    std::size_t layers = 0;
    std::size_t vocab_size = 0;
    std::size_t max_sequence = 0;
    double dropout = 0.0;

    static ModelConfig paper() { return {2560, 20, 32, 28896, 1024, 0.0}; }
    static ModelConfig desk() { return {64, 4, 2, 512, 128, 0.0}; }

    void validate() const;
};

// Closed form V*H + T*H + L*(12H^2 + 13H) + 2H: tied LM head, all biases and
// norm parameters counted, task heads excluded. Accepts layers = 0.
std::uint64_t count_params(const ModelConfig& config);

enum class HeadKind { language_model, option_scorer, classifier };

struct HeadSpec {
    HeadKind kind = HeadKind::language_model;
    std::size_t num_labels = 1;
};

struct GenerateStrategy {
    bool greedy = true;
    double temperature = 1.0;
    // 0 = no filter; otherwise sample from the k highest logits (ties kept
    // by value, then lowest index).
    std::size_t top_k = 0;
    std::uint64_t seed = 0;
};

// Marker token ids for the sequence-classification prompt
// [CTX] context [QST] question [ANS].
struct ClsMarkers {
    TokenId ctx = 0;
    TokenId qst = 0;
    TokenId ans = 0;
};

// Parameter names registered on a tape for one training step.
struct GraphParams {
    std::map<std::string, Var> vars;
};

// Pre-LN decoder-only transformer: learned absolute positional embeddings,
// causal self-attention, GELU MLP, LM head tied to the token embedding.
// Parameters live in a name -> tensor map; graph-building methods put them on
// a caller-owned tape so training and inference share one forward definition.
template <class S>
class Model {
public:
    static Model init(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    const std::optional<HeadSpec>& head() const { return head_; }

    std::map<std::string, Tensor<S>>& params() { return params_; }
    const std::map<std::string, Tensor<S>>& params() const { return params_; }
    Tensor<S>& param(const std::string& name);
    const Tensor<S>& param(const std::string& name) const;

    // Adds a task head (option_scorer emits 1 score, classifier num_labels).
    void attach_head(HeadSpec spec, std::uint64_t seed);
    void set_head_spec(std::optional<HeadSpec> spec) { head_ = std::move(spec); }

    // Grows the token embedding to new_vocab rows; each new row starts at
    // the column mean of the existing rows.
    void extend_vocab(std::size_t new_vocab);

    // Total parameter element count, task head included when attached.
    std::uint64_t parameter_elements() const;

    // --- graph building (training and inference share these) ---
    GraphParams register_params(Tape<S>& tape) const;
    // Hidden states [T',H] for one sequence. mask[i] != 0 marks a real
    // position; dropout_rng == nullptr disables dropout.
    Var hidden_graph(Tape<S>& tape, const GraphParams& gp, const std::vector<TokenId>& ids,
                     const std::vector<std::uint8_t>& mask, Rng* dropout_rng) const;
    // Tied LM head: logits [T',V] = hidden * tok_emb^T.
    Var lm_logits_graph(Tape<S>& tape, const GraphParams& gp, Var hidden) const;
    // Task head applied to the hidden state at `position`; returns [1,k].
    Var head_scores_graph(Tape<S>& tape, const GraphParams& gp, Var hidden,
                          std::size_t position) const;
    // Pairs every registered parameter with its gradient after backward.
    std::vector<ParamRef<S>> param_refs(Tape<S>& tape, const GraphParams& gp);

    // --- inference ---
    // ids/mask are [B][T'] with one shared T'; returns [B,T',V] logits for
    // language_model, [B,1] for option_scorer, [B,num_labels] for classifier.
    Tensor<S> forward(const std::vector<std::vector<TokenId>>& ids,
                      const std::vector<std::vector<std::uint8_t>>& mask,
                      const HeadSpec& head) const;
    // One score per option for question+option concatenations. Overlength
    // sequences drop tokens from the front of the question, never the option.
    std::vector<double> score_options(const std::vector<TokenId>& question,
                                      const std::vector<std::vector<TokenId>>& options) const;
    // Scores for [CTX] context [QST] question [ANS]; overlength truncates
    // the context from the left.
    std::vector<double> classify_sequence(const std::vector<TokenId>& context,
                                          const std::vector<TokenId>& question,
                                          const ClsMarkers& markers) const;
    std::vector<TokenId> generate(const std::vector<TokenId>& prompt,
                                  const GenerateStrategy& strategy, std::size_t max_new,
                                  std::optional<TokenId> stop) const;

    // Builds the (possibly truncated) question+option sequence used by
    // score_options; exposed so fine-tuning trains on identical inputs.
    std::vector<TokenId> option_sequence(const std::vector<TokenId>& question,
                                         const std::vector<TokenId>& option) const;
    std::vector<TokenId> classifier_sequence(const std::vector<TokenId>& context,
                                             const std::vector<TokenId>& question,
                                             const ClsMarkers& markers) const;

    explicit Model(ModelConfig config);

private:
    void check_sequence(const std::vector<TokenId>& ids,
                        const std::vector<std::uint8_t>& mask) const;

    ModelConfig config_;
    std::map<std::string, Tensor<S>> params_;
    std::optional<HeadSpec> head_;
};

// Lowest-index argmax over scores; the shared prediction rule for option
// scoring and classification.
std::size_t argmax_lowest(const std::vector<double>& scores);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace bmlm
