#include "bmlm/tokenizer.hpp"

#include <algorithm>
#include <limits>

#include "json.hpp"

#include "bmlm/errors.hpp"
#include "bmlm/hash.hpp"
#include "bmlm/io.hpp"
#include "bmlm/version.hpp"

namespace bmlm {

namespace {

bool is_ws(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::uint64_t pair_key(TokenId l, TokenId r) {
    return (static_cast<std::uint64_t>(l) << 32) | r;
}

int hex_value(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
}

// A stretch of text that is either one special-token literal or ordinary
// text to be pre-tokenized. Specials are matched leftmost-longest so they
// stay atomic even inside words.
struct Segment {
    bool special = false;
    TokenId id = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
};

std::vector<Segment> split_segments(std::string_view text,
                                    const std::vector<std::string>& specials,
                                    const std::unordered_map<std::string, TokenId>& ids) {
    std::vector<Segment> segs;
    std::size_t pos = 0;
    std::size_t seg_begin = 0;
    while (pos < text.size()) {
        std::size_t best_len = 0;
        TokenId best_id = 0;
        for (const std::string& s : specials) {
            if (s.size() > best_len && text.compare(pos, s.size(), std::string_view(s)) == 0) {
                best_len = s.size();
                best_id = ids.at(s);
            }
        }
        if (best_len > 0) {
            if (pos > seg_begin) segs.push_back({false, 0, seg_begin, pos});
            segs.push_back({true, best_id, pos, pos + best_len});
            pos += best_len;
            seg_begin = pos;
        } else {
            ++pos;
        }
    }
    if (seg_begin < text.size()) segs.push_back({false, 0, seg_begin, text.size()});
    return segs;
}

}  // namespace

void TokenizerTrainConfig::validate() const {
    if (vocab_size < 256 + special_tokens.size()) {
        throw ConfigError("vocab_size " + std::to_string(vocab_size) +
                          " leaves no room for the 256-byte alphabet plus " +
                          std::to_string(special_tokens.size()) + " specials");
    }
    if (min_frequency < 1) {
        throw ConfigError("min_frequency must be >= 1");
    }
    for (const std::string& s : special_tokens) {
        if (s.empty()) throw ConfigError("special tokens must be non-empty");
    }
}

std::string escape_token_text(std::string_view bytes) {
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size());
    for (unsigned char c : bytes) {
        if (c == '\\') {
            out += "\\\\";
        } else if (c >= 0x20 && c <= 0x7e) {
            out += static_cast<char>(c);
        } else {
            out += "\\x";
            out += hex[c >> 4];
            out += hex[c & 0xf];
        }
    }
    return out;
}

std::string unescape_token_text(std::string_view escaped) {
    std::string out;
    std::size_t i = 0;
    while (i < escaped.size()) {
        if (escaped[i] != '\\') {
            out += escaped[i];
            ++i;
            continue;
        }
        if (i + 1 < escaped.size() && escaped[i + 1] == '\\') {
            out += '\\';
            i += 2;
            continue;
        }
        if (i + 3 < escaped.size() && escaped[i + 1] == 'x') {
            const int hi = hex_value(escaped[i + 2]);
            const int lo = hex_value(escaped[i + 3]);
            if (hi >= 0 && lo >= 0) {
                out += static_cast<char>(hi * 16 + lo);
                i += 4;
                continue;
            }
        }
        throw DataError("invalid escape in token text: " + std::string(escaped));
    }
    return out;
}

namespace detail {

std::vector<PreToken> pre_tokenize(std::string_view text, bool add_prefix_space) {
    std::vector<PreToken> out;
    const std::size_t n = text.size();
    std::size_t i = 0;
    while (i < n) {
        if (is_ws(static_cast<unsigned char>(text[i]))) {
            std::size_t j = i;
            while (j < n && is_ws(static_cast<unsigned char>(text[j]))) ++j;
            // A single trailing 0x20 attaches to the following word; the
            // rest of the whitespace run is its own pre-token.
            const bool donate = j < n && text[j - 1] == ' ';
            const std::size_t run_end = donate ? j - 1 : j;
            if (run_end > i) {
                out.push_back({std::string(text.substr(i, run_end - i)), i, false, false});
            }
            if (donate) {
                std::size_t k = j;
                while (k < n && !is_ws(static_cast<unsigned char>(text[k]))) ++k;
                out.push_back({std::string(text.substr(j - 1, k - (j - 1))), j - 1, false, true});
                i = k;
            } else {
                i = j;
            }
        } else {
            std::size_t k = i;
            while (k < n && !is_ws(static_cast<unsigned char>(text[k]))) ++k;
            PreToken pt{std::string(text.substr(i, k - i)), i, false, false};
            if (i == 0 && add_prefix_space) {
                pt.bytes.insert(pt.bytes.begin(), ' ');
                pt.synthetic_prefix = true;
                pt.attached_space = true;
            }
            out.push_back(std::move(pt));
            i = k;
        }
    }
    return out;
}

}  // namespace detail

void TokenizerModel::register_token(std::string text, bool special) {
    const TokenId id = static_cast<TokenId>(id_to_text_.size());
    auto [it, inserted] = text_to_id_.emplace(text, id);
    if (!inserted) {
        throw ConfigError("duplicate token text: " + escape_token_text(text));
    }
    id_to_text_.push_back(std::move(text));
    if (special) special_ids_.insert(id);
}

void TokenizerModel::index_merges() {
    pair_lookup_.clear();
    for (const MergeRule& mr : merges_) {
        const TokenId l = id_of(mr.left);
        const TokenId r = id_of(mr.right);
        const TokenId p = id_of(mr.left + mr.right);
        pair_lookup_[pair_key(l, r)] = {mr.rank, p};
    }
}

TokenizerModel TokenizerModel::train(const std::vector<std::string>& corpus,
                                     TokenizerTrainConfig config) {
    config.validate();
    TokenizerModel m;
    m.config_ = std::move(config);
    for (int b = 0; b < 256; ++b) {
        m.register_token(std::string(1, static_cast<char>(b)), false);
    }
    for (const std::string& s : m.config_.special_tokens) {
        m.register_token(s, true);
    }
    std::unordered_set<std::string> special_texts(m.config_.special_tokens.begin(),
                                                  m.config_.special_tokens.end());

    // Word-count table: each distinct pre-token weighted by corpus frequency.
    struct Word {
        std::vector<TokenId> syms;
        long long count = 0;
    };
    std::vector<Word> words;
    std::unordered_map<std::string, std::size_t> word_index;
    for (const std::string& doc : corpus) {
        for (const Segment& seg : split_segments(doc, m.config_.special_tokens, m.text_to_id_)) {
            if (seg.special) continue;
            const std::string_view piece(doc.data() + seg.begin, seg.end - seg.begin);
            for (const detail::PreToken& pt :
                 detail::pre_tokenize(piece, m.config_.add_prefix_space && seg.begin == 0)) {
                auto [it, inserted] = word_index.emplace(pt.bytes, words.size());
                if (inserted) {
                    Word w;
                    w.syms.reserve(pt.bytes.size());
                    for (unsigned char c : pt.bytes) w.syms.push_back(c);
                    words.push_back(std::move(w));
                }
                words[it->second].count += 1;
            }
        }
    }

    std::unordered_map<std::uint64_t, long long> pair_counts;
    std::unordered_map<std::uint64_t, std::unordered_set<std::size_t>> pair_words;
    auto count_word = [&](std::size_t w, long long sign) {
        const Word& word = words[w];
        for (std::size_t i = 0; i + 1 < word.syms.size(); ++i) {
            const std::uint64_t k = pair_key(word.syms[i], word.syms[i + 1]);
            pair_counts[k] += sign * word.count;
            if (sign > 0) pair_words[k].insert(w);
        }
    };
    for (std::size_t w = 0; w < words.size(); ++w) count_word(w, +1);

    while (m.id_to_text_.size() < m.config_.vocab_size) {
        // Highest count wins; ties fall to the lexicographically smallest
        // (left, right) texts, so selection is order-independent.
        bool found = false;
        std::uint64_t best_key = 0;
        long long best_count = 0;
        std::pair<std::string_view, std::string_view> best_texts;
        for (const auto& [k, count] : pair_counts) {
            if (count < static_cast<long long>(m.config_.min_frequency)) continue;
            const TokenId l = static_cast<TokenId>(k >> 32);
            const TokenId r = static_cast<TokenId>(k & 0xffffffffu);
            std::pair<std::string_view, std::string_view> texts{m.id_to_text_[l], m.id_to_text_[r]};
            if (special_texts.count(m.id_to_text_[l] + m.id_to_text_[r])) continue;
            if (!found || count > best_count || (count == best_count && texts < best_texts)) {
                found = true;
                best_key = k;
                best_count = count;
                best_texts = texts;
            }
        }
        if (!found) break;

        const TokenId left = static_cast<TokenId>(best_key >> 32);
        const TokenId right = static_cast<TokenId>(best_key & 0xffffffffu);
        const std::string product = m.id_to_text_[left] + m.id_to_text_[right];
        TokenId product_id;
        if (auto existing = m.find_id(product)) {
            // Two different merges can build the same byte string; reuse the
            // id so the vocab stays a bijection.
            product_id = *existing;
        } else {
            product_id = static_cast<TokenId>(m.id_to_text_.size());
            m.register_token(product, false);
        }
        m.merges_.push_back({m.id_to_text_[left], m.id_to_text_[right], m.merges_.size()});

        const std::unordered_set<std::size_t> touched = pair_words[best_key];
        for (std::size_t w : touched) {
            Word& word = words[w];
            bool present = false;
            for (std::size_t i = 0; i + 1 < word.syms.size(); ++i) {
                if (word.syms[i] == left && word.syms[i + 1] == right) {
                    present = true;
                    break;
                }
            }
            if (!present) continue;  // stale occurrence entry
            count_word(w, -1);
            std::vector<TokenId> next;
            next.reserve(word.syms.size());
            for (std::size_t i = 0; i < word.syms.size();) {
                if (i + 1 < word.syms.size() && word.syms[i] == left && word.syms[i + 1] == right) {
                    next.push_back(product_id);
                    i += 2;
                } else {
                    next.push_back(word.syms[i]);
                    ++i;
                }
            }
            word.syms = std::move(next);
            count_word(w, +1);
        }
    }

    m.index_merges();
    return m;
}

std::vector<TokenId> TokenizerModel::merge_pre_token(std::string_view bytes) const {
    std::vector<TokenId> syms;
    syms.reserve(bytes.size());
    for (unsigned char c : bytes) syms.push_back(c);
    while (syms.size() >= 2 && !pair_lookup_.empty()) {
        std::size_t best_rank = std::numeric_limits<std::size_t>::max();
        TokenId best_left = 0, best_right = 0, product = 0;
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
            auto it = pair_lookup_.find(pair_key(syms[i], syms[i + 1]));
            if (it != pair_lookup_.end() && it->second.first < best_rank) {
                best_rank = it->second.first;
                best_left = syms[i];
                best_right = syms[i + 1];
                product = it->second.second;
            }
        }
        if (best_rank == std::numeric_limits<std::size_t>::max()) break;
        std::vector<TokenId> next;
        next.reserve(syms.size());
        for (std::size_t i = 0; i < syms.size();) {
            if (i + 1 < syms.size() && syms[i] == best_left && syms[i + 1] == best_right) {
                next.push_back(product);
                i += 2;
            } else {
                next.push_back(syms[i]);
                ++i;
            }
        }
        syms = std::move(next);
    }
    return syms;
}

Encoding TokenizerModel::encode(std::string_view text) const {
    Encoding enc;
    if (text.empty()) return enc;
    // One merge cache per call: pre-tokens repeat heavily in natural text.
    std::unordered_map<std::string, std::vector<TokenId>> cache;
    for (const Segment& seg : split_segments(text, config_.special_tokens, text_to_id_)) {
        if (seg.special) {
            enc.ids.push_back(seg.id);
            enc.offsets.emplace_back(seg.begin, seg.end);
            continue;
        }
        const std::string_view piece = text.substr(seg.begin, seg.end - seg.begin);
        for (const detail::PreToken& pt :
             detail::pre_tokenize(piece, config_.add_prefix_space && seg.begin == 0)) {
            auto it = cache.find(pt.bytes);
            if (it == cache.end()) {
                it = cache.emplace(pt.bytes, merge_pre_token(pt.bytes)).first;
            }
            const std::size_t base = seg.begin + pt.source_start;
            // Byte b of the pre-token maps to a source offset; the synthetic
            // prefix byte has no source byte and maps to an empty range.
            auto src = [&](std::size_t b) {
                if (!pt.synthetic_prefix) return base + b;
                return base + (b > 0 ? b - 1 : 0);
            };
            std::size_t b = 0;
            bool first_token = true;
            for (TokenId id : it->second) {
                const std::size_t b_end = b + id_to_text_[id].size();
                std::size_t o_begin = src(b);
                const std::size_t o_end = src(b_end);
                if (config_.trim_offsets && first_token && pt.attached_space &&
                    !pt.synthetic_prefix) {
                    o_begin = std::min(o_begin + 1, o_end);
                }
                enc.ids.push_back(id);
                enc.offsets.emplace_back(o_begin, o_end);
                b = b_end;
                first_token = false;
            }
        }
    }
    return enc;
}

std::vector<TokenId> TokenizerModel::encode_ids(std::string_view text) const {
    return encode(text).ids;
}

std::string TokenizerModel::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) out += text_of(id);
    return out;
}

TokenId TokenizerModel::id_of(std::string_view text) const {
    auto it = text_to_id_.find(std::string(text));
    if (it == text_to_id_.end()) {
        throw DomainError("unknown token text: " + escape_token_text(text));
    }
    return it->second;
}

std::optional<TokenId> TokenizerModel::find_id(std::string_view text) const {
    auto it = text_to_id_.find(std::string(text));
    if (it == text_to_id_.end()) return std::nullopt;
    return it->second;
}

const std::string& TokenizerModel::text_of(TokenId id) const {
    if (id >= id_to_text_.size()) {
        throw DomainError("unknown token id: " + std::to_string(id));
    }
    return id_to_text_[id];
}

std::string TokenizerModel::to_json() const {
    nlohmann::ordered_json j;
    j["version"] = kTokenizerFileVersion;
    nlohmann::ordered_json cfg;
    cfg["vocab_size"] = config_.vocab_size;
    cfg["min_frequency"] = config_.min_frequency;
    cfg["add_prefix_space"] = config_.add_prefix_space;
    cfg["trim_offsets"] = config_.trim_offsets;
    nlohmann::ordered_json cfg_specials = nlohmann::ordered_json::array();
    for (const std::string& s : config_.special_tokens) cfg_specials.push_back(escape_token_text(s));
    cfg["special_tokens"] = cfg_specials;
    j["config"] = cfg;
    nlohmann::ordered_json vocab = nlohmann::ordered_json::object();
    for (std::size_t id = 0; id < id_to_text_.size(); ++id) {
        vocab[escape_token_text(id_to_text_[id])] = id;
    }
    j["vocab"] = vocab;
    nlohmann::ordered_json merges = nlohmann::ordered_json::array();
    for (const MergeRule& mr : merges_) {
        merges.push_back({escape_token_text(mr.left), escape_token_text(mr.right)});
    }
    j["merges"] = merges;
    nlohmann::ordered_json specials = nlohmann::ordered_json::array();
    for (const std::string& s : config_.special_tokens) specials.push_back(escape_token_text(s));
    j["specials"] = specials;
    return j.dump(2) + "\n";
}

TokenizerModel TokenizerModel::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(std::string("tokenizer file is not valid JSON: ") + e.what());
    }
    try {
        const int version = j.at("version").get<int>();
        if (version != kTokenizerFileVersion) {
            throw VersionError("unsupported tokenizer file version " + std::to_string(version));
        }
        TokenizerModel m;
        const auto& cfg = j.at("config");
        m.config_.vocab_size = cfg.at("vocab_size").get<std::size_t>();
        m.config_.min_frequency = cfg.at("min_frequency").get<std::size_t>();
        m.config_.add_prefix_space = cfg.at("add_prefix_space").get<bool>();
        m.config_.trim_offsets = cfg.at("trim_offsets").get<bool>();
        for (const auto& s : cfg.at("special_tokens")) {
            m.config_.special_tokens.push_back(unescape_token_text(s.get<std::string>()));
        }
        m.config_.validate();

        const auto& vocab = j.at("vocab");
        m.id_to_text_.resize(vocab.size());
        std::vector<bool> seen(vocab.size(), false);
        for (auto it = vocab.begin(); it != vocab.end(); ++it) {
            const std::size_t id = it.value().get<std::size_t>();
            if (id >= m.id_to_text_.size() || seen[id]) {
                throw DataError("vocab ids must be unique and dense from 0");
            }
            seen[id] = true;
            m.id_to_text_[id] = unescape_token_text(it.key());
        }
        for (std::size_t id = 0; id < m.id_to_text_.size(); ++id) {
            m.text_to_id_.emplace(m.id_to_text_[id], static_cast<TokenId>(id));
        }
        if (m.text_to_id_.size() != m.id_to_text_.size()) {
            throw DataError("vocab texts must be unique");
        }
        if (m.id_to_text_.size() < 256) {
            throw DataError("vocab is missing the byte alphabet");
        }
        for (int b = 0; b < 256; ++b) {
            if (m.id_to_text_[static_cast<std::size_t>(b)] !=
                std::string(1, static_cast<char>(b))) {
                throw DataError("byte token " + std::to_string(b) + " is not at id " +
                                std::to_string(b));
            }
        }
        for (const std::string& s : m.config_.special_tokens) {
            m.special_ids_.insert(m.id_of(s));
        }
        std::size_t rank = 0;
        for (const auto& entry : j.at("merges")) {
            if (!entry.is_array() || entry.size() != 2) {
                throw DataError("merge entries must be [left, right] pairs");
            }
            MergeRule mr;
            mr.left = unescape_token_text(entry[0].get<std::string>());
            mr.right = unescape_token_text(entry[1].get<std::string>());
            mr.rank = rank++;
            if (!m.find_id(mr.left) || !m.find_id(mr.right) || !m.find_id(mr.left + mr.right)) {
                throw DataError("merge rule references a token absent from the vocab");
            }
            m.merges_.push_back(std::move(mr));
        }
        if (m.id_to_text_.size() > m.config_.vocab_size) {
            throw DataError("vocab exceeds config.vocab_size");
        }
        m.index_merges();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed tokenizer file: ") + e.what());
    }
}

TokenizerModel TokenizerModel::load(const std::filesystem::path& path) {
    return from_json(read_file(path));
}

void TokenizerModel::save(const std::filesystem::path& path) const {
    write_file(path, to_json());
}

std::uint64_t TokenizerModel::content_hash() const {
    return fnv1a64(to_json());
}

TokenizerModel TokenizerModel::with_added_specials(const std::vector<std::string>& extra) const {
    TokenizerModel m = *this;
    for (const std::string& s : extra) {
        if (auto id = m.find_id(s)) {
            if (!m.is_special(*id)) {
                throw ContractError("cannot promote existing ordinary token to special: " +
                                    escape_token_text(s));
            }
            continue;
        }
        m.register_token(s, true);
        m.config_.special_tokens.push_back(s);
    }
    m.config_.vocab_size = std::max(m.config_.vocab_size, m.id_to_text_.size());
    return m;
}

FragmentationReport compare_tokenizers(const TokenizerModel& a, const TokenizerModel& b,
                                       const std::vector<std::string>& terms) {
    FragmentationReport report;
    double total_a = 0, total_b = 0;
    for (const std::string& term : terms) {
        FragmentationRow row;
        row.term = term;
        for (TokenId id : a.encode_ids(term)) row.tokens_a.push_back(a.text_of(id));
        for (TokenId id : b.encode_ids(term)) row.tokens_b.push_back(b.text_of(id));
        row.count_a = row.tokens_a.size();
        row.count_b = row.tokens_b.size();
        total_a += static_cast<double>(row.count_a);
        total_b += static_cast<double>(row.count_b);
        report.rows.push_back(std::move(row));
    }
    if (!terms.empty()) {
        report.mean_tokens_a = total_a / static_cast<double>(terms.size());
        report.mean_tokens_b = total_b / static_cast<double>(terms.size());
    }
    return report;
}

std::string FragmentationReport::to_json() const {
    nlohmann::ordered_json j;
    nlohmann::ordered_json rows_json = nlohmann::ordered_json::array();
    for (const FragmentationRow& row : rows) {
        nlohmann::ordered_json r;
        r["term"] = escape_token_text(row.term);
        r["count_a"] = row.count_a;
        r["count_b"] = row.count_b;
        nlohmann::ordered_json ta = nlohmann::ordered_json::array();
        for (const std::string& t : row.tokens_a) ta.push_back(escape_token_text(t));
        nlohmann::ordered_json tb = nlohmann::ordered_json::array();
        for (const std::string& t : row.tokens_b) tb.push_back(escape_token_text(t));
        r["tokens_a"] = ta;
        r["tokens_b"] = tb;
        rows_json.push_back(std::move(r));
    }
    j["rows"] = rows_json;
    if (mean_tokens_a) {
        j["mean_tokens_a"] = *mean_tokens_a;
        j["mean_tokens_b"] = *mean_tokens_b;
    } else {
        j["mean_tokens_a"] = nullptr;
        j["mean_tokens_b"] = nullptr;
    }
    return j.dump(2) + "\n";
}

}  // namespace bmlm
