#include "bmlm/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include "json.hpp"

#include "bmlm/errors.hpp"
#include "bmlm/hash.hpp"
#include "bmlm/io.hpp"
#include "bmlm/version.hpp"

namespace bmlm {

namespace {

template <class S>
constexpr const char* precision_tag();
template <>
constexpr const char* precision_tag<float>() {
    return "f32";
}
template <>
constexpr const char* precision_tag<double>() {
    return "f64";
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& buf, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    }
    return v;
}

std::uint64_t get_u64(const std::string& buf, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    }
    return v;
}

void put_scalar(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
void put_scalar(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void get_scalar(const std::string& buf, std::size_t off, float& v) {
    v = std::bit_cast<float>(get_u32(buf, off));
}
void get_scalar(const std::string& buf, std::size_t off, double& v) {
    v = std::bit_cast<double>(get_u64(buf, off));
}

std::string head_kind_name(const std::optional<HeadSpec>& head) {
    if (!head.has_value()) return "none";
    switch (head->kind) {
        case HeadKind::option_scorer:
            return "option_scorer";
        case HeadKind::classifier:
            return "classifier";
        default:
            return "none";
    }
}

nlohmann::ordered_json config_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["hidden_size"] = c.hidden_size;
    j["heads"] = c.heads;
    j["layers"] = c.layers;
    j["vocab_size"] = c.vocab_size;
    j["max_sequence"] = c.max_sequence;
    j["dropout"] = c.dropout;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.hidden_size = j.at("hidden_size").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_sequence = j.at("max_sequence").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    return c;
}

// Reads the framing, verifies magic/version/trailing hash, and returns the
// manifest text plus the payload byte range.
struct Framing {
    std::string manifest;
    std::size_t payload_begin = 0;
    std::size_t payload_end = 0;
};

Framing read_framing(const std::string& buf) {
    if (buf.size() < 4 + 4 + 8 + 8) throw IntegrityError("checkpoint file is truncated");
    if (buf.compare(0, 4, "BMLM") != 0) throw IntegrityError("bad checkpoint magic bytes");
    const std::uint32_t version = get_u32(buf, 4);
    if (version != kCheckpointVersion) {
        throw VersionError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint64_t stored_hash = get_u64(buf, buf.size() - 8);
    Fnv1a64 h;
    h.update(buf.data(), buf.size() - 8);
    if (h.digest() != stored_hash) {
        throw IntegrityError("checkpoint content hash mismatch");
    }
    const std::uint64_t mlen = get_u64(buf, 8);
    if (16 + mlen + 8 > buf.size()) throw IntegrityError("checkpoint file is truncated");
    Framing f;
    f.manifest = buf.substr(16, mlen);
    f.payload_begin = 16 + mlen;
    f.payload_end = buf.size() - 8;
    return f;
}

}  // namespace

template <class S>
void save_checkpoint(const Checkpoint<S>& ckpt, const std::filesystem::path& path) {
    std::vector<std::pair<std::string, const Tensor<S>*>> tensors;
    for (const auto& [name, t] : ckpt.model.params()) tensors.emplace_back(name, &t);
    if (ckpt.optimizer.has_value()) {
        for (const auto& [name, slot] : ckpt.optimizer->slots()) {
            tensors.emplace_back("opt.m." + name, &slot.m);
            tensors.emplace_back("opt.v." + name, &slot.v);
        }
    }

    std::string payload;
    nlohmann::ordered_json table = nlohmann::ordered_json::array();
    for (const auto& [name, t] : tensors) {
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["precision"] = precision_tag<S>();
        entry["shape"] = t->shape;
        entry["offset"] = payload.size();
        table.push_back(std::move(entry));
        for (const S v : t->data) put_scalar(payload, v);
    }

    nlohmann::ordered_json manifest;
    manifest["config"] = config_json(ckpt.model.config());
    nlohmann::ordered_json policy;
    policy["compute"] = ckpt.precision.compute;
    policy["parameter_storage"] = ckpt.precision.parameter_storage;
    policy["optimizer_storage"] = ckpt.precision.optimizer_storage;
    policy["gradient_communication"] = ckpt.precision.gradient_communication;
    manifest["precision_policy"] = policy;
    manifest["tokenizer_hash"] = ckpt.tokenizer_hash;
    manifest["step"] = ckpt.step;
    nlohmann::ordered_json head;
    head["kind"] = head_kind_name(ckpt.model.head());
    head["num_labels"] = ckpt.model.head().has_value() ? ckpt.model.head()->num_labels : 0;
    head["labels"] = ckpt.labels;
    manifest["head"] = head;
    nlohmann::ordered_json opt;
    opt["present"] = ckpt.optimizer.has_value();
    if (ckpt.optimizer.has_value()) {
        opt["step"] = ckpt.optimizer->step_count();
        const AdamWConfig& oc = ckpt.optimizer->config();
        nlohmann::ordered_json ocj;
        ocj["peak_lr"] = oc.peak_lr;
        ocj["beta1"] = oc.beta1;
        ocj["beta2"] = oc.beta2;
        ocj["epsilon"] = oc.epsilon;
        ocj["weight_decay"] = oc.weight_decay;
        ocj["clip_norm"] = oc.clip_norm;
        std::vector<std::string> no_decay(oc.no_decay_names.begin(), oc.no_decay_names.end());
        std::sort(no_decay.begin(), no_decay.end());
        ocj["no_decay_names"] = no_decay;
        opt["config"] = ocj;
    }
    manifest["optimizer"] = opt;
    nlohmann::ordered_json curve = nlohmann::ordered_json::array();
    for (const LossSample& s : ckpt.loss_curve) {
        curve.push_back({{"step", s.step}, {"loss", s.loss}});
    }
    manifest["loss_curve"] = curve;
    manifest["tensors"] = table;

    const std::string mstr = manifest.dump();
    std::string out;
    out.reserve(16 + mstr.size() + payload.size() + 8);
    out += "BMLM";
    put_u32(out, kCheckpointVersion);
    put_u64(out, mstr.size());
    out += mstr;
    out += payload;
    Fnv1a64 h;
    h.update(out.data(), out.size());
    put_u64(out, h.digest());
    write_file(path, out);
}

template <class S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
    const std::string buf = read_file(path);
    const Framing framing = read_framing(buf);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(framing.manifest);
    } catch (const nlohmann::json::parse_error& e) {
        throw IntegrityError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
    }

    try {
        Model<S> model(config_from_json(manifest.at("config")));
        const auto& head = manifest.at("head");
        const std::string kind = head.at("kind").get<std::string>();
        if (kind == "option_scorer") {
            model.set_head_spec(HeadSpec{HeadKind::option_scorer, 1});
        } else if (kind == "classifier") {
            model.set_head_spec(HeadSpec{HeadKind::classifier, head.at("num_labels").get<std::size_t>()});
        } else if (kind != "none") {
            throw DataError("unknown head kind '" + kind + "'");
        }

        Checkpoint<S> ckpt(std::move(model));
        for (const auto& l : head.at("labels")) ckpt.labels.push_back(l.get<std::string>());
        ckpt.step = manifest.at("step").get<std::size_t>();
        ckpt.tokenizer_hash = manifest.at("tokenizer_hash").get<std::string>();
        const auto& policy = manifest.at("precision_policy");
        ckpt.precision.compute = policy.at("compute").get<std::string>();
        ckpt.precision.parameter_storage = policy.at("parameter_storage").get<std::string>();
        ckpt.precision.optimizer_storage = policy.at("optimizer_storage").get<std::string>();
        ckpt.precision.gradient_communication = policy.at("gradient_communication").get<std::string>();
        for (const auto& s : manifest.at("loss_curve")) {
            ckpt.loss_curve.push_back({s.at("step").get<std::size_t>(), s.at("loss").get<double>()});
        }

        const auto& opt = manifest.at("optimizer");
        if (opt.at("present").get<bool>()) {
            const auto& ocj = opt.at("config");
            AdamWConfig oc;
            oc.peak_lr = ocj.at("peak_lr").get<double>();
            oc.beta1 = ocj.at("beta1").get<double>();
            oc.beta2 = ocj.at("beta2").get<double>();
            oc.epsilon = ocj.at("epsilon").get<double>();
            oc.weight_decay = ocj.at("weight_decay").get<double>();
            oc.clip_norm = ocj.at("clip_norm").get<double>();
            for (const auto& n : ocj.at("no_decay_names")) {
                oc.no_decay_names.insert(n.get<std::string>());
            }
            ckpt.optimizer.emplace(oc);
            ckpt.optimizer->set_step_count(opt.at("step").get<std::size_t>());
        }

        for (const auto& entry : manifest.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const std::string precision = entry.at("precision").get<std::string>();
            if (precision != precision_tag<S>()) {
                throw DataError("tensor '" + name + "' stored as " + precision +
                                " but loaded as " + precision_tag<S>());
            }
            std::vector<std::size_t> shape;
            for (const auto& d : entry.at("shape")) shape.push_back(d.get<std::size_t>());
            const std::size_t offset = entry.at("offset").get<std::size_t>();
            Tensor<S> t(shape);
            const std::size_t bytes = t.numel() * sizeof(S);
            if (framing.payload_begin + offset + bytes > framing.payload_end) {
                throw IntegrityError("tensor '" + name + "' extends past the payload");
            }
            for (std::size_t i = 0; i < t.numel(); ++i) {
                get_scalar(buf, framing.payload_begin + offset + i * sizeof(S), t.data[i]);
            }

            if (name.rfind("opt.m.", 0) == 0 || name.rfind("opt.v.", 0) == 0) {
                if (!ckpt.optimizer.has_value()) {
                    throw DataError("optimizer tensor '" + name + "' without optimizer metadata");
                }
                const bool is_m = name[4] == 'm';
                auto& slot = ckpt.optimizer->mutable_slots()[name.substr(6)];
                (is_m ? slot.m : slot.v) = std::move(t);
            } else if (name == "head.w" || name == "head.b") {
                if (!ckpt.model.head().has_value()) {
                    throw DataError("head tensor '" + name + "' without a head spec");
                }
                ckpt.model.params().insert_or_assign(name, std::move(t));
            } else {
                auto it = ckpt.model.params().find(name);
                if (it == ckpt.model.params().end()) {
                    throw DataError("unexpected tensor '" + name + "' in checkpoint");
                }
                if (it->second.shape != t.shape) {
                    throw DataError("tensor '" + name + "' shape does not match the config");
                }
                it->second = std::move(t);
            }
        }
        if (ckpt.model.head().has_value() &&
            (ckpt.model.params().find("head.w") == ckpt.model.params().end() ||
             ckpt.model.params().find("head.b") == ckpt.model.params().end())) {
            throw DataError("checkpoint declares a task head but lacks its tensors");
        }
        return ckpt;
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("malformed checkpoint manifest: ") + e.what());
    }
}

std::string checkpoint_manifest(const std::filesystem::path& path) {
    const std::string buf = read_file(path);
    const Framing framing = read_framing(buf);
    try {
        return nlohmann::ordered_json::parse(framing.manifest).dump(2) + "\n";
    } catch (const nlohmann::json::parse_error& e) {
        throw IntegrityError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
    }
}

std::uint64_t checkpoint_file_hash(const std::filesystem::path& path) {
    return fnv1a64(read_file(path));
}

template void save_checkpoint<float>(const Checkpoint<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const Checkpoint<double>&, const std::filesystem::path&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace bmlm
