#include "bmlm/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bmlm/errors.hpp"
#include "bmlm/hash.hpp"

namespace bmlm {

namespace {

constexpr double kMaskValue = -1e9;
constexpr double kInitStddev = 0.02;

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void ModelConfig::validate() const {
    if (hidden_size == 0 || heads == 0 || layers == 0 || vocab_size == 0 || max_sequence == 0) {
        throw ConfigError("model config dimensions must be positive");
    }
    if (hidden_size % heads != 0) {
        throw ConfigError("hidden_size " + std::to_string(hidden_size) +
                          " not divisible by heads " + std::to_string(heads));
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw ConfigError("dropout must lie in [0, 1)");
    }
}

std::uint64_t count_params(const ModelConfig& config) {
    if (config.hidden_size == 0 || config.heads == 0 || config.vocab_size == 0 ||
        config.max_sequence == 0) {
        throw ConfigError("model config dimensions must be positive");
    }
    if (config.hidden_size % config.heads != 0) {
        throw ConfigError("hidden_size not divisible by heads");
    }
    const std::uint64_t h = config.hidden_size;
    const std::uint64_t v = config.vocab_size;
    const std::uint64_t t = config.max_sequence;
    const std::uint64_t l = config.layers;
    return v * h + t * h + l * (12 * h * h + 13 * h) + 2 * h;
}

std::size_t argmax_lowest(const std::vector<double>& scores) {
    if (scores.empty()) throw ContractError("argmax over empty scores");
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = i;
    }
    return best;
}

template <class S>
Model<S>::Model(ModelConfig config) : config_(config) {
    config_.validate();
    const std::size_t h = config_.hidden_size;
    params_.emplace("tok_emb", Tensor<S>({config_.vocab_size, h}));
    params_.emplace("pos_emb", Tensor<S>({config_.max_sequence, h}));
    for (std::size_t l = 0; l < config_.layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        params_.emplace(p + "ln1.gain", Tensor<S>({h}));
        params_.emplace(p + "ln1.bias", Tensor<S>({h}));
        params_.emplace(p + "attn.qkv.w", Tensor<S>({h, 3 * h}));
        params_.emplace(p + "attn.qkv.b", Tensor<S>({3 * h}));
        params_.emplace(p + "attn.out.w", Tensor<S>({h, h}));
        params_.emplace(p + "attn.out.b", Tensor<S>({h}));
        params_.emplace(p + "ln2.gain", Tensor<S>({h}));
        params_.emplace(p + "ln2.bias", Tensor<S>({h}));
        params_.emplace(p + "mlp.fc.w", Tensor<S>({h, 4 * h}));
        params_.emplace(p + "mlp.fc.b", Tensor<S>({4 * h}));
        params_.emplace(p + "mlp.proj.w", Tensor<S>({4 * h, h}));
        params_.emplace(p + "mlp.proj.b", Tensor<S>({h}));
    }
    params_.emplace("final_norm.gain", Tensor<S>({h}));
    params_.emplace("final_norm.bias", Tensor<S>({h}));
}

template <class S>
Model<S> Model<S>::init(ModelConfig config, std::uint64_t seed) {
    Model m(config);
    // Residual-branch output projections are shrunk by 1/sqrt(2L) so the
    // residual stream variance stays flat across depth.
    const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.layers));
    for (auto& [name, tensor] : m.params_) {
        if (ends_with(name, ".gain")) {
            std::fill(tensor.data.begin(), tensor.data.end(), S(1));
        } else if (ends_with(name, ".bias") || ends_with(name, ".b")) {
            std::fill(tensor.data.begin(), tensor.data.end(), S(0));
        } else {
            Rng rng(derive_seed(seed, name));
            double scale = kInitStddev;
            if (ends_with(name, "attn.out.w") || ends_with(name, "mlp.proj.w")) {
                scale *= residual_scale;
            }
            for (S& v : tensor.data) v = static_cast<S>(rng.normal(0.0, scale));
        }
    }
    return m;
}

template <class S>
Tensor<S>& Model<S>::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

template <class S>
const Tensor<S>& Model<S>::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

template <class S>
void Model<S>::attach_head(HeadSpec spec, std::uint64_t seed) {
    if (spec.kind == HeadKind::language_model) {
        throw ContractError("the language-model head is tied to the embedding, not attached");
    }
    if (spec.kind == HeadKind::option_scorer) spec.num_labels = 1;
    if (spec.num_labels == 0) throw ContractError("classifier head needs at least one label");
    const std::size_t h = config_.hidden_size;
    Tensor<S> w({h, spec.num_labels});
    Rng rng(derive_seed(seed, "head.w"));
    for (S& v : w.data) v = static_cast<S>(rng.normal(0.0, kInitStddev));
    params_.insert_or_assign("head.w", std::move(w));
    params_.insert_or_assign("head.b", Tensor<S>({spec.num_labels}));
    head_ = spec;
}

template <class S>
void Model<S>::extend_vocab(std::size_t new_vocab) {
    const std::size_t old_vocab = config_.vocab_size;
    if (new_vocab < old_vocab) {
        throw ContractError("extend_vocab cannot shrink the vocabulary");
    }
    if (new_vocab == old_vocab) return;
    const std::size_t h = config_.hidden_size;
    const Tensor<S>& old_emb = param("tok_emb");
    Tensor<S> next({new_vocab, h});
    std::copy(old_emb.data.begin(), old_emb.data.end(), next.data.begin());
    // New rows start at the column mean of the trained rows.
    std::vector<double> mean(h, 0.0);
    for (std::size_t r = 0; r < old_vocab; ++r) {
        for (std::size_t c = 0; c < h; ++c) mean[c] += static_cast<double>(old_emb.at(r, c));
    }
    for (std::size_t c = 0; c < h; ++c) mean[c] /= static_cast<double>(old_vocab);
    for (std::size_t r = old_vocab; r < new_vocab; ++r) {
        for (std::size_t c = 0; c < h; ++c) next.at(r, c) = static_cast<S>(mean[c]);
    }
    params_.insert_or_assign("tok_emb", std::move(next));
    config_.vocab_size = new_vocab;
}

template <class S>
std::uint64_t Model<S>::parameter_elements() const {
    std::uint64_t total = 0;
    for (const auto& [name, tensor] : params_) total += tensor.numel();
    return total;
}

template <class S>
GraphParams Model<S>::register_params(Tape<S>& tape) const {
    GraphParams gp;
    for (const auto& [name, tensor] : params_) {
        gp.vars.emplace(name, tape.leaf(tensor, true));
    }
    return gp;
}

template <class S>
void Model<S>::check_sequence(const std::vector<TokenId>& ids,
                              const std::vector<std::uint8_t>& mask) const {
    if (ids.empty()) throw ContractError("forward: empty sequence");
    if (ids.size() > config_.max_sequence) {
        throw ContractError("sequence length " + std::to_string(ids.size()) +
                            " exceeds max_sequence " + std::to_string(config_.max_sequence));
    }
    if (mask.size() != ids.size()) throw ShapeError("mask length does not match sequence length");
    bool any_real = false;
    for (std::uint8_t m : mask) any_real |= (m != 0);
    if (!any_real) throw ContractError("forward: row has no real positions");
    for (TokenId id : ids) {
        if (id >= config_.vocab_size) {
            throw DomainError("token id " + std::to_string(id) + " out of range for vocab " +
                              std::to_string(config_.vocab_size));
        }
    }
}

template <class S>
Var Model<S>::hidden_graph(Tape<S>& tape, const GraphParams& gp, const std::vector<TokenId>& ids,
                           const std::vector<std::uint8_t>& mask, Rng* dropout_rng) const {
    check_sequence(ids, mask);
    const std::size_t t = ids.size();
    const std::size_t h = config_.hidden_size;
    const std::size_t d = h / config_.heads;

    auto maybe_dropout = [&](Var v) {
        if (dropout_rng != nullptr && config_.dropout > 0.0) {
            return ops::dropout(tape, v, config_.dropout, *dropout_rng);
        }
        return v;
    };

    std::vector<std::size_t> tok_idx(ids.begin(), ids.end());
    std::vector<std::size_t> pos_idx(t);
    std::iota(pos_idx.begin(), pos_idx.end(), std::size_t{0});
    Var x = ops::add(tape, ops::gather_rows(tape, gp.vars.at("tok_emb"), tok_idx),
                     ops::gather_rows(tape, gp.vars.at("pos_emb"), pos_idx));
    x = maybe_dropout(x);

    // Additive mask: position i may see j when j <= i and j is real. The
    // diagonal stays open so fully-padded rows cannot see the future either.
    Tensor<S> mask_mat({t, t});
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < t; ++j) {
            const bool visible = j <= i && (mask[j] != 0 || j == i);
            mask_mat.at(i, j) = visible ? S(0) : static_cast<S>(kMaskValue);
        }
    }
    Var mask_var = tape.constant(std::move(mask_mat));

    for (std::size_t l = 0; l < config_.layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        Var normed = ops::layer_norm(tape, x, gp.vars.at(p + "ln1.gain"), gp.vars.at(p + "ln1.bias"));
        Var qkv = ops::add_rowvec(tape, ops::matmul(tape, normed, gp.vars.at(p + "attn.qkv.w")),
                                  gp.vars.at(p + "attn.qkv.b"));
        std::vector<Var> head_outs;
        head_outs.reserve(config_.heads);
        for (std::size_t hd = 0; hd < config_.heads; ++hd) {
            Var q = ops::slice_cols(tape, qkv, hd * d, d);
            Var k = ops::slice_cols(tape, qkv, h + hd * d, d);
            Var v = ops::slice_cols(tape, qkv, 2 * h + hd * d, d);
            Var scores = ops::scale(tape, ops::matmul_nt(tape, q, k),
                                    1.0 / std::sqrt(static_cast<double>(d)));
            scores = ops::add(tape, scores, mask_var);
            Var probs = maybe_dropout(ops::softmax(tape, scores));
            head_outs.push_back(ops::matmul(tape, probs, v));
        }
        Var attn = ops::concat_cols(tape, head_outs);
        attn = ops::add_rowvec(tape, ops::matmul(tape, attn, gp.vars.at(p + "attn.out.w")),
                               gp.vars.at(p + "attn.out.b"));
        x = ops::add(tape, x, maybe_dropout(attn));

        Var normed2 = ops::layer_norm(tape, x, gp.vars.at(p + "ln2.gain"), gp.vars.at(p + "ln2.bias"));
        Var fc = ops::gelu(tape, ops::add_rowvec(tape, ops::matmul(tape, normed2, gp.vars.at(p + "mlp.fc.w")),
                                                 gp.vars.at(p + "mlp.fc.b")));
        Var mlp = ops::add_rowvec(tape, ops::matmul(tape, fc, gp.vars.at(p + "mlp.proj.w")),
                                  gp.vars.at(p + "mlp.proj.b"));
        x = ops::add(tape, x, maybe_dropout(mlp));
    }
    return ops::layer_norm(tape, x, gp.vars.at("final_norm.gain"), gp.vars.at("final_norm.bias"));
}

template <class S>
Var Model<S>::lm_logits_graph(Tape<S>& tape, const GraphParams& gp, Var hidden) const {
    return ops::matmul_nt(tape, hidden, gp.vars.at("tok_emb"));
}

template <class S>
Var Model<S>::head_scores_graph(Tape<S>& tape, const GraphParams& gp, Var hidden,
                                std::size_t position) const {
    if (!head_.has_value()) throw ContractError("no task head attached");
    Var row = ops::slice_rows(tape, hidden, position, 1);
    return ops::add_rowvec(tape, ops::matmul(tape, row, gp.vars.at("head.w")), gp.vars.at("head.b"));
}

template <class S>
std::vector<ParamRef<S>> Model<S>::param_refs(Tape<S>& tape, const GraphParams& gp) {
    std::vector<ParamRef<S>> refs;
    refs.reserve(params_.size());
    for (auto& [name, tensor] : params_) {
        refs.push_back({name, &tensor, &tape.grad(gp.vars.at(name))});
    }
    return refs;
}

template <class S>
Tensor<S> Model<S>::forward(const std::vector<std::vector<TokenId>>& ids,
                            const std::vector<std::vector<std::uint8_t>>& mask,
                            const HeadSpec& head) const {
    if (ids.empty()) throw ContractError("forward: empty batch");
    if (mask.size() != ids.size()) throw ShapeError("forward: mask batch size mismatch");
    const std::size_t t = ids[0].size();
    for (const auto& row : ids) {
        if (row.size() != t) throw ShapeError("forward: ragged batch");
    }
    if (head.kind != HeadKind::language_model) {
        if (!head_.has_value() || head_->kind != head.kind ||
            (head.kind == HeadKind::classifier && head_->num_labels != head.num_labels)) {
            throw ContractError("requested task head is not attached to this model");
        }
    }

    Tape<S> tape;
    const GraphParams gp = register_params(tape);
    const std::size_t batch = ids.size();
    Tensor<S> out;
    if (head.kind == HeadKind::language_model) {
        out = Tensor<S>({batch, t, config_.vocab_size});
    } else {
        const std::size_t k = head.kind == HeadKind::option_scorer ? 1 : head.num_labels;
        out = Tensor<S>({batch, k});
    }
    for (std::size_t b = 0; b < batch; ++b) {
        Var hidden = hidden_graph(tape, gp, ids[b], mask[b], nullptr);
        if (head.kind == HeadKind::language_model) {
            const Tensor<S>& logits = tape.value(lm_logits_graph(tape, gp, hidden));
            std::copy(logits.data.begin(), logits.data.end(),
                      out.data.begin() + static_cast<std::ptrdiff_t>(b * t * config_.vocab_size));
        } else {
            std::size_t last_real = 0;
            for (std::size_t i = 0; i < mask[b].size(); ++i) {
                if (mask[b][i] != 0) last_real = i;
            }
            const Tensor<S>& scores = tape.value(head_scores_graph(tape, gp, hidden, last_real));
            std::copy(scores.data.begin(), scores.data.end(),
                      out.data.begin() + static_cast<std::ptrdiff_t>(b * scores.numel()));
        }
    }
    return out;
}

template <class S>
std::vector<TokenId> Model<S>::option_sequence(const std::vector<TokenId>& question,
                                               const std::vector<TokenId>& option) const {
    const std::size_t t = config_.max_sequence;
    if (option.size() > t) {
        throw ContractError("option of " + std::to_string(option.size()) +
                            " tokens cannot fit the context window");
    }
    const std::size_t q_keep = std::min(question.size(), t - option.size());
    std::vector<TokenId> seq(question.end() - static_cast<std::ptrdiff_t>(q_keep), question.end());
    seq.insert(seq.end(), option.begin(), option.end());
    if (seq.empty()) throw ContractError("empty question+option sequence");
    return seq;
}

template <class S>
std::vector<double> Model<S>::score_options(const std::vector<TokenId>& question,
                                            const std::vector<std::vector<TokenId>>& options) const {
    if (options.empty()) throw ContractError("score_options: no options");
    if (!head_.has_value() || head_->kind != HeadKind::option_scorer) {
        throw ContractError("score_options requires an option_scorer head");
    }
    std::vector<double> scores;
    scores.reserve(options.size());
    for (const auto& option : options) {
        const std::vector<TokenId> seq = option_sequence(question, option);
        const std::vector<std::uint8_t> m(seq.size(), 1);
        const Tensor<S> s = forward({seq}, {m}, HeadSpec{HeadKind::option_scorer, 1});
        scores.push_back(static_cast<double>(s.data[0]));
    }
    return scores;
}

template <class S>
std::vector<TokenId> Model<S>::classifier_sequence(const std::vector<TokenId>& context,
                                                   const std::vector<TokenId>& question,
                                                   const ClsMarkers& markers) const {
    const std::size_t t = config_.max_sequence;
    if (3 + question.size() > t) {
        throw ContractError("markers plus question exceed the context window");
    }
    const std::size_t ctx_keep = std::min(context.size(), t - 3 - question.size());
    std::vector<TokenId> seq;
    seq.reserve(3 + ctx_keep + question.size());
    seq.push_back(markers.ctx);
    seq.insert(seq.end(), context.end() - static_cast<std::ptrdiff_t>(ctx_keep), context.end());
    seq.push_back(markers.qst);
    seq.insert(seq.end(), question.begin(), question.end());
    seq.push_back(markers.ans);
    return seq;
}

template <class S>
std::vector<double> Model<S>::classify_sequence(const std::vector<TokenId>& context,
                                                const std::vector<TokenId>& question,
                                                const ClsMarkers& markers) const {
    if (!head_.has_value() || head_->kind != HeadKind::classifier) {
        throw ContractError("classify_sequence requires a classifier head");
    }
    const std::vector<TokenId> seq = classifier_sequence(context, question, markers);
    const std::vector<std::uint8_t> m(seq.size(), 1);
    const Tensor<S> s = forward({seq}, {m}, HeadSpec{HeadKind::classifier, head_->num_labels});
    return std::vector<double>(s.data.begin(), s.data.end());
}

template <class S>
std::vector<TokenId> Model<S>::generate(const std::vector<TokenId>& prompt,
                                        const GenerateStrategy& strategy, std::size_t max_new,
                                        std::optional<TokenId> stop) const {
    if (prompt.empty()) throw ContractError("generate: empty prompt");
    if (prompt.size() >= config_.max_sequence) {
        throw ContractError("generate: prompt must be shorter than max_sequence");
    }
    if (!strategy.greedy && strategy.temperature <= 0.0) {
        throw ContractError("generate: sampling temperature must be positive");
    }
    std::vector<TokenId> out = prompt;
    Rng rng(strategy.seed);
    const std::size_t v = config_.vocab_size;
    for (std::size_t n = 0; n < max_new; ++n) {
        const std::size_t start =
            out.size() > config_.max_sequence ? out.size() - config_.max_sequence : 0;
        const std::vector<TokenId> window(out.begin() + static_cast<std::ptrdiff_t>(start),
                                          out.end());
        Tape<S> tape;
        const GraphParams gp = register_params(tape);
        const std::vector<std::uint8_t> m(window.size(), 1);
        Var hidden = hidden_graph(tape, gp, window, m, nullptr);
        const Tensor<S>& logits = tape.value(lm_logits_graph(tape, gp, hidden));
        const S* last = &logits.data[(window.size() - 1) * v];

        TokenId next = 0;
        if (strategy.greedy) {
            for (std::size_t j = 1; j < v; ++j) {
                if (last[j] > last[next]) next = static_cast<TokenId>(j);
            }
        } else {
            std::vector<std::size_t> order(v);
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return last[a] > last[b]; });
            const std::size_t keep =
                strategy.top_k == 0 ? v : std::min<std::size_t>(strategy.top_k, v);
            double mx = static_cast<double>(last[order[0]]);
            std::vector<double> probs(keep);
            double sum = 0.0;
            for (std::size_t j = 0; j < keep; ++j) {
                probs[j] = std::exp((static_cast<double>(last[order[j]]) - mx) /
                                    strategy.temperature);
                sum += probs[j];
            }
            double r = rng.uniform() * sum;
            std::size_t pick = keep - 1;
            double acc = 0.0;
            for (std::size_t j = 0; j < keep; ++j) {
                acc += probs[j];
                if (r < acc) {
                    pick = j;
                    break;
                }
            }
            next = static_cast<TokenId>(order[pick]);
        }
        if (stop.has_value() && next == *stop) break;
        out.push_back(next);
    }
    return out;
}

template class Model<float>;
template class Model<double>;

}  // namespace bmlm
