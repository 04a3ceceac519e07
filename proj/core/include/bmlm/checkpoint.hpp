#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bmlm/optimizer.hpp"
#include "bmlm/transformer.hpp"

namespace bmlm {

// Precision labels recorded in checkpoint metadata. Desk-scale runs compute
// in full 32-bit precision; the paper() preset preserves the published
// mixed-precision split as a verbatim record.
struct PrecisionPolicy {
    std::string compute = "fp32";
    std::string parameter_storage = "fp32";
    std::string optimizer_storage = "fp32";
    std::string gradient_communication = "fp32";

    static PrecisionPolicy desk() { return {}; }
    static PrecisionPolicy paper() { return {"bf16", "fp32", "fp32", "fp32"}; }
};

struct LossSample {
    std::size_t step = 0;
    double loss = 0.0;
};

// Everything a run needs to restart bit-exactly: model (config, parameters,
// head), optional optimizer moments, counters, precision labels, the
// tokenizer's content hash, and the loss curve so far.
template <class S>
struct Checkpoint {
    Model<S> model;
    std::optional<AdamW<S>> optimizer;
    std::size_t step = 0;
    PrecisionPolicy precision;
    std::string tokenizer_hash;
    // Classifier label names, in score order, when the head is a classifier.
    std::vector<std::string> labels;
    std::vector<LossSample> loss_curve;

    explicit Checkpoint(Model<S> m) : model(std::move(m)) {}
};

// Binary layout: "BMLM", u32 version, u64 manifest length, JSON manifest
// (config, precision policy, tokenizer hash, counters, tensor table of
// name/precision/shape/offset), raw little-endian IEEE-754 payloads in
// row-major order, trailing u64 FNV-1a over all preceding bytes.
template <class S>
void save_checkpoint(const Checkpoint<S>& ckpt, const std::filesystem::path& path);

template <class S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path);

// Manifest JSON without loading tensor payloads; for `inspect`.
std::string checkpoint_manifest(const std::filesystem::path& path);

// FNV-1a of the serialized file, as stored in eval reports.
std::uint64_t checkpoint_file_hash(const std::filesystem::path& path);

extern template void save_checkpoint<float>(const Checkpoint<float>&,
                                            const std::filesystem::path&);
extern template void save_checkpoint<double>(const Checkpoint<double>&,
                                             const std::filesystem::path&);
extern template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
extern template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace bmlm
