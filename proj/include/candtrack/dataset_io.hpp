#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "candtrack/simulator.hpp"

namespace candtrack {

nlohmann::json sequence_to_json(const SequenceRecord& seq);
// Throws FormatError on schema violations.
SequenceRecord sequence_from_json(const nlohmann::json& j);

void write_sequence(const SequenceRecord& seq, const std::filesystem::path& path);
SequenceRecord read_sequence(const std::filesystem::path& path);

// A single file, or every *.json file of a directory in lexicographic order.
std::vector<SequenceRecord> read_sequences(const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);
// Compact, deterministic serialization followed by a newline.
void write_json_file(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace candtrack
