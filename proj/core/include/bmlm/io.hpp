#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace bmlm {

// Whole-file read; throws InputError when the path is unreadable.
std::string read_file(const std::filesystem::path& path);

void write_file(const std::filesystem::path& path, const std::string& contents);

// One document per file when `path` is a directory (regular files, sorted by
// name), otherwise the single file's contents as one document. Empty
// documents are dropped.
std::vector<std::string> read_documents(const std::filesystem::path& path);

// Splits on '\n'; a trailing newline does not produce an empty final line.
std::vector<std::string> split_lines(const std::string& text);

}  // namespace bmlm
