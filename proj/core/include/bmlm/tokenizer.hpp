#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace bmlm {

using TokenId = std::uint32_t;

struct TokenizerTrainConfig {
    std::size_t vocab_size = 28896;
    std::size_t min_frequency = 2;
    bool add_prefix_space = false;
    bool trim_offsets = true;
    std::vector<std::string> special_tokens;

    // Throws ConfigError unless vocab_size >= 256 + |special_tokens| and
    // min_frequency >= 1.
    void validate() const;
};

struct MergeRule {
    std::string left;
    std::string right;
    std::size_t rank = 0;
};

struct Encoding {
    std::vector<TokenId> ids;
    // Half-open byte ranges into the source text, one per token, ascending.
    std::vector<std::pair<std::size_t, std::size_t>> offsets;
};

// Byte-level BPE model. Ids 0..255 are the byte alphabet, specials follow in
// config order, merge products follow in rank order. Immutable once built;
// encode/decode are const and safe to call concurrently.
class TokenizerModel {
public:
    static TokenizerModel train(const std::vector<std::string>& corpus,
                                TokenizerTrainConfig config);

    static TokenizerModel from_json(const std::string& text);
    static TokenizerModel load(const std::filesystem::path& path);
    std::string to_json() const;
    void save(const std::filesystem::path& path) const;

    Encoding encode(std::string_view text) const;
    std::vector<TokenId> encode_ids(std::string_view text) const;
    std::string decode(const std::vector<TokenId>& ids) const;

    std::size_t vocab_size() const { return id_to_text_.size(); }
    const TokenizerTrainConfig& config() const { return config_; }
    const std::vector<MergeRule>& merges() const { return merges_; }
    const std::vector<std::string>& specials() const { return config_.special_tokens; }

    TokenId id_of(std::string_view text) const;
    std::optional<TokenId> find_id(std::string_view text) const;
    const std::string& text_of(TokenId id) const;
    bool is_special(TokenId id) const { return special_ids_.count(id) != 0; }

    // FNV-1a over the serialized form; the checkpoint format stores this so
    // a model and its tokenizer can be cross-checked.
    std::uint64_t content_hash() const;

    // Derived model with extra atomic specials appended at the end of the
    // vocabulary. Existing ids are unchanged, so embeddings trained against
    // this model's parent stay valid.
    TokenizerModel with_added_specials(const std::vector<std::string>& extra) const;

private:
    TokenizerModel() = default;

    void register_token(std::string text, bool special);
    void index_merges();
    std::vector<TokenId> merge_pre_token(std::string_view bytes) const;

    TokenizerTrainConfig config_;
    std::vector<std::string> id_to_text_;
    std::unordered_map<std::string, TokenId> text_to_id_;
    std::vector<MergeRule> merges_;
    std::unordered_set<TokenId> special_ids_;
    // (left_id << 32 | right_id) -> (rank, product_id)
    std::unordered_map<std::uint64_t, std::pair<std::size_t, TokenId>> pair_lookup_;
};

struct FragmentationRow {
    std::string term;
    std::size_t count_a = 0;
    std::size_t count_b = 0;
    std::vector<std::string> tokens_a;
    std::vector<std::string> tokens_b;
};

// Side-by-side fragmentation of a term list under two tokenizers. Means are
// absent when the term list is empty.
struct FragmentationReport {
    std::vector<FragmentationRow> rows;
    std::optional<double> mean_tokens_a;
    std::optional<double> mean_tokens_b;

    std::string to_json() const;
};

FragmentationReport compare_tokenizers(const TokenizerModel& a, const TokenizerModel& b,
                                       const std::vector<std::string>& terms);

// Byte-string escaping used in the model file so non-UTF-8 token texts
// survive JSON: backslash doubles, printable ASCII stays, everything else
// becomes \xNN.
std::string escape_token_text(std::string_view bytes);
std::string unescape_token_text(std::string_view escaped);

namespace detail {

// One pre-token: maximal non-whitespace run with its single preceding space
// byte attached, or a leftover whitespace run. `synthetic_prefix` marks an
// add_prefix_space space that has no source byte.
struct PreToken {
    std::string bytes;
    std::size_t source_start = 0;
    bool synthetic_prefix = false;
    bool attached_space = false;
};

std::vector<PreToken> pre_tokenize(std::string_view text, bool add_prefix_space);

}  // namespace detail

}  // namespace bmlm
