#include "pera/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <utility>
#include <vector>

#include "pera/error.hpp"

namespace pera {

namespace {

std::vector<std::pair<std::string, MatF*>> state_arrays(ModelState& s) {
  std::vector<std::pair<std::string, MatF*>> out;
  for (auto& r : param_refs(s.student)) out.emplace_back("student/" + r.name, r.tensor);
  for (auto& r : param_refs(s.teacher)) out.emplace_back("teacher/" + r.name, r.tensor);
  out.emplace_back("center", &s.center);
  for (auto& r : param_refs(s.optimizer.m)) out.emplace_back("adam_m/" + r.name, r.tensor);
  for (auto& r : param_refs(s.optimizer.v)) out.emplace_back("adam_v/" + r.name, r.tensor);
  return out;
}

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) fail(ErrorKind::kIo, "failed writing '" + path.string() + "'");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kCheckpoint, "checkpoint file missing: '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void save_checkpoint(const ModelState& state, const RunConfig& config,
                     const std::filesystem::path& path) {
  auto& mutable_state = const_cast<ModelState&>(state);
  const auto arrays = state_arrays(mutable_state);

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  std::error_code ec;
  std::filesystem::remove_all(tmp, ec);
  std::filesystem::create_directories(tmp, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create checkpoint directory '" + tmp.string() + "'");

  Json index;
  index["format_version"] = kCheckpointFormatVersion;
  index["dtype"] = "float32";
  index["byte_order"] = "little";
  index["arrays"] = Json::array();
  {
    std::ofstream blob(tmp / "tensors.bin", std::ios::binary);
    if (!blob) fail(ErrorKind::kIo, "cannot write '" + (tmp / "tensors.bin").string() + "'");
    std::uint64_t offset = 0;
    std::vector<std::uint32_t> words;
    for (const auto& [name, m] : arrays) {
      words.resize(static_cast<std::size_t>(m->size()));
      for (std::size_t i = 0; i < words.size(); ++i) {
        words[i] = to_little(std::bit_cast<std::uint32_t>(m->data()[i]));
      }
      const std::uint64_t nbytes = words.size() * sizeof(std::uint32_t);
      blob.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(nbytes));
      index["arrays"].push_back({{"name", name},
                                 {"shape", {m->rows(), m->cols()}},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
      offset += nbytes;
    }
    blob.flush();
    if (!blob) fail(ErrorKind::kIo, "failed writing checkpoint tensors (disk full?)");
  }
  write_text(tmp / "index.json", index.dump(2) + "\n");

  Json meta;
  meta["format_version"] = kCheckpointFormatVersion;
  meta["config_hash"] = config_hash(config);
  meta["step"] = state.step;
  meta["optimizer_step"] = state.optimizer.t;
  meta["config"] = to_json(config);
  write_text(tmp / "meta.json", meta.dump(2) + "\n");

  std::filesystem::remove_all(path, ec);
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::kIo, "cannot move checkpoint into '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::is_directory(path)) {
    fail(ErrorKind::kCheckpoint, "checkpoint directory not found: '" + path.string() + "'");
  }
  Json meta, index;
  try {
    meta = Json::parse(read_text(path / "meta.json"));
    index = Json::parse(read_text(path / "index.json"));
  } catch (const Json::parse_error& e) {
    fail(ErrorKind::kCheckpoint, "corrupt checkpoint metadata in '" + path.string() + "': " + e.what());
  }
  Checkpoint ckpt;
  try {
    const int version = meta.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion || index.at("format_version").get<int>() != version) {
      fail(ErrorKind::kCheckpoint, "checkpoint format version " + std::to_string(version) +
                                       " unsupported (expected " +
                                       std::to_string(kCheckpointFormatVersion) + ")");
    }
    if (index.at("dtype").get<std::string>() != "float32" ||
        index.at("byte_order").get<std::string>() != "little") {
      fail(ErrorKind::kCheckpoint, "checkpoint dtype/byte order unsupported");
    }
    ckpt.config = config_from_json(meta.at("config"));
    if (config_hash(ckpt.config) != meta.at("config_hash").get<std::string>()) {
      fail(ErrorKind::kCheckpoint, "checkpoint config hash mismatch in '" + path.string() + "'");
    }
    ckpt.state = init_state(ckpt.config);
    ckpt.state.step = meta.at("step").get<std::int64_t>();
    ckpt.state.optimizer.t = meta.at("optimizer_step").get<std::int64_t>();
  } catch (const Json::exception& e) {
    fail(ErrorKind::kCheckpoint, "malformed checkpoint metadata: " + std::string(e.what()));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kCheckpoint) throw;
    fail(ErrorKind::kCheckpoint, "checkpoint config invalid: " + std::string(e.what()));
  }

  const std::string blob = read_text(path / "tensors.bin");
  auto arrays = state_arrays(ckpt.state);
  const Json& entries = index.at("arrays");
  if (!entries.is_array() || entries.size() != arrays.size()) {
    fail(ErrorKind::kCheckpoint, "checkpoint index does not match the model structure");
  }
  std::uint64_t expected_offset = 0;
  for (std::size_t k = 0; k < arrays.size(); ++k) {
    const Json& e = entries[k];
    auto& [name, m] = arrays[k];
    try {
      if (e.at("name").get<std::string>() != name) {
        fail(ErrorKind::kCheckpoint, "checkpoint array '" + e.at("name").get<std::string>() +
                                         "' where '" + name + "' was expected");
      }
      const auto rows = e.at("shape").at(0).get<Eigen::Index>();
      const auto cols = e.at("shape").at(1).get<Eigen::Index>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto nbytes = e.at("nbytes").get<std::uint64_t>();
      if (rows != m->rows() || cols != m->cols() ||
          nbytes != static_cast<std::uint64_t>(rows * cols) * 4 || offset != expected_offset) {
        fail(ErrorKind::kCheckpoint, "checkpoint array '" + name + "' has an unexpected layout");
      }
      if (offset + nbytes > blob.size()) {
        fail(ErrorKind::kCheckpoint, "checkpoint tensors truncated at '" + name + "'");
      }
      for (Eigen::Index i = 0; i < m->size(); ++i) {
        std::uint32_t w;
        std::memcpy(&w, blob.data() + offset + 4 * i, 4);
        m->data()[i] = std::bit_cast<float>(to_little(w));
      }
      expected_offset += nbytes;
    } catch (const Json::exception& ex) {
      fail(ErrorKind::kCheckpoint, "malformed checkpoint index: " + std::string(ex.what()));
    }
  }
  if (expected_offset != blob.size()) {
    fail(ErrorKind::kCheckpoint, "checkpoint tensors file has trailing bytes");
  }
  return ckpt;
}

}  // namespace pera
