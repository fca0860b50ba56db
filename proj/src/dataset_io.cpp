#include "candtrack/dataset_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "candtrack/errors.hpp"

namespace candtrack {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw FormatError("dataset: " + what);
}

}  // namespace

nlohmann::json sequence_to_json(const SequenceRecord& seq) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : seq.frames) {
    nlohmann::json objects = nlohmann::json::array();
    for (const auto& o : f.objects) {
      objects.push_back({{"uid", o.uid},
                         {"cell", {o.cell.row, o.cell.col}},
                         {"score", o.score},
                         {"appearance", o.appearance}});
    }
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : f.events) events.push_back({{"kind", e.kind}, {"uid", e.uid}});
    frames.push_back({{"scores", std::vector<double>(f.map.values().begin(), f.map.values().end())},
                      {"objects", std::move(objects)},
                      {"target_uid", f.target_uid},
                      {"events", std::move(events)}});
  }
  return {{"meta",
           {{"H", seq.meta.height},
            {"W", seq.meta.width},
            {"d_a", seq.meta.appearance_dim},
            {"frames", seq.meta.frames},
            {"seed", seq.meta.seed}}},
          {"frames", std::move(frames)}};
}

SequenceRecord sequence_from_json(const nlohmann::json& j) {
  try {
    SequenceRecord seq;
    const auto& m = j.at("meta");
    seq.meta.height = m.at("H").get<std::size_t>();
    seq.meta.width = m.at("W").get<std::size_t>();
    seq.meta.appearance_dim = m.at("d_a").get<std::size_t>();
    seq.meta.frames = m.at("frames").get<std::size_t>();
    seq.meta.seed = m.value("seed", std::uint64_t{0});
    require(seq.meta.height > 0 && seq.meta.width > 0, "map dimensions must be positive");
    const auto& frames = j.at("frames");
    require(frames.is_array(), "'frames' must be an array");
    require(frames.size() == seq.meta.frames, "frame count does not match meta.frames");
    std::optional<int> target;
    for (std::size_t t = 0; t < frames.size(); ++t) {
      const auto& jf = frames[t];
      SequenceFrame f;
      auto scores = jf.at("scores").get<std::vector<double>>();
      require(scores.size() == seq.meta.height * seq.meta.width, "score map size mismatch in frame " + std::to_string(t));
      for (double v : scores) require(std::isfinite(v), "non-finite score in frame " + std::to_string(t));
      f.map = ScoreMap(seq.meta.height, seq.meta.width, std::move(scores), t);
      f.target_uid = jf.at("target_uid").get<int>();
      require(!target || *target == f.target_uid, "target uid changes within the sequence");
      target = f.target_uid;
      for (const auto& jo : jf.at("objects")) {
        GtObject o;
        o.uid = jo.at("uid").get<int>();
        const auto cell = jo.at("cell").get<std::vector<int>>();
        require(cell.size() == 2, "object cell must have two entries");
        o.cell = {cell[0], cell[1]};
        require(f.map.contains(o.cell), "object cell outside the map");
        o.score = jo.at("score").get<double>();
        o.appearance = jo.at("appearance").get<std::vector<double>>();
        require(o.appearance.size() == seq.meta.appearance_dim, "appearance dimension mismatch");
        f.objects.push_back(std::move(o));
      }
      if (jf.contains("events")) {
        for (const auto& je : jf.at("events")) f.events.push_back({je.at("kind").get<std::string>(), je.at("uid").get<int>()});
      }
      seq.frames.push_back(std::move(f));
    }
    return seq;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("dataset: ") + e.what());
  }
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump() << '\n';
}

void write_sequence(const SequenceRecord& seq, const std::filesystem::path& path) {
  write_json_file(sequence_to_json(seq), path);
}

SequenceRecord read_sequence(const std::filesystem::path& path) {
  try {
    return sequence_from_json(read_json_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<SequenceRecord> read_sequences(const std::filesystem::path& path) {
  if (!std::filesystem::is_directory(path)) return {read_sequence(path)};
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(path))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("no sequence files in " + path.string());
  std::vector<SequenceRecord> out;
  for (const auto& f : files) out.push_back(read_sequence(f));
  return out;
}

}  // namespace candtrack
