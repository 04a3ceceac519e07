#pragma once

namespace bmlm {

inline constexpr const char* kVersion = "0.1.0";

// Checkpoint container format version (see checkpoint.hpp).
inline constexpr unsigned kCheckpointVersion = 1;

// Tokenizer model file version (see tokenizer.hpp).
inline constexpr unsigned kTokenizerFileVersion = 1;

}  // namespace bmlm
