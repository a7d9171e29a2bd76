#include "potvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "potvit/error.hpp"

namespace potvit {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32" || dtype == "i32") return 4;
  if (dtype == "i8") return 1;
  throw ConfigError("unsupported manifest dtype '" + dtype + "'");
}

template <class T>
void append_raw(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <class T>
T read_raw(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void BlobWriter::add(const std::string& name, const Tensor& t) {
  ManifestEntry e{name, t.shape(), "f32", "", bytes_.size(), 4 * t.size(), 0, true};
  for (float v : t.data()) append_raw(bytes_, v);
  entries_.push_back(std::move(e));
}

void BlobWriter::add(const std::string& name, const IntTensor& t) {
  const bool narrow = t.bits() <= 8;
  ManifestEntry e{name, t.shape(), narrow ? "i8" : "i32", "", bytes_.size(), (narrow ? 1 : 4) * t.size(),
                  t.bits(), t.is_signed()};
  for (std::int32_t v : t.data()) {
    if (narrow)
      bytes_.push_back(static_cast<std::uint8_t>(v & 0xFF));
    else
      append_raw(bytes_, v);
  }
  entries_.push_back(std::move(e));
}

void BlobWriter::write(const fs::path& dir, const std::string& blob_file) const {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / blob_file, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + (dir / blob_file).string());
    out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
  }
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& e : entries_) {
    nlohmann::json j{{"name", e.name},        {"shape", e.shape},      {"dtype", e.dtype},
                     {"file", blob_file},     {"byte_offset", e.byte_offset},
                     {"byte_len", e.byte_len}};
    if (e.dtype != "f32") {
      j["bits"] = e.bits;
      j["signed"] = e.is_signed;
    }
    manifest.push_back(std::move(j));
  }
  write_json_file(dir / "manifest.json", manifest);
}

BlobReader::BlobReader(const fs::path& dir) {
  const auto manifest = read_json_file(dir / "manifest.json");
  if (!manifest.is_array()) throw ConfigError("manifest.json must be an array");
  try {
    for (const auto& j : manifest) {
      ManifestEntry e;
      e.name = j.at("name").get<std::string>();
      e.shape = j.at("shape").get<Shape>();
      e.dtype = j.at("dtype").get<std::string>();
      e.file = j.at("file").get<std::string>();
      e.byte_offset = j.at("byte_offset").get<std::uint64_t>();
      e.byte_len = j.at("byte_len").get<std::uint64_t>();
      e.bits = j.value("bits", 32);
      e.is_signed = j.value("signed", true);
      if (e.file.find('/') != std::string::npos || e.file.find("..") != std::string::npos)
        throw ConfigError("manifest blob path '" + e.file + "' must be a plain file name");
      if (e.byte_len != shape_numel(e.shape) * dtype_size(e.dtype))
        throw ConfigError("manifest entry '" + e.name + "' byte_len does not match its shape");
      if (!files_.count(e.file)) files_[e.file] = read_file(dir / e.file);
      if (e.byte_offset + e.byte_len > files_[e.file].size())
        throw ConfigError("blob for '" + e.name + "' is truncated");
      if (index_.count(e.name)) throw ConfigError("duplicate manifest entry '" + e.name + "'");
      index_[e.name] = entries_.size();
      entries_.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("corrupt manifest: ") + ex.what());
  }
  // Every byte of every blob must be claimed by exactly the listed tensors.
  std::map<std::string, std::uint64_t> claimed;
  for (const auto& e : entries_) claimed[e.file] += e.byte_len;
  for (const auto& [file, bytes] : files_)
    if (claimed[file] != bytes.size()) throw ConfigError("blob file " + file + " length does not match manifest");
}

const ManifestEntry& BlobReader::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("manifest has no tensor '" + name + "'");
  return entries_[it->second];
}

Tensor BlobReader::tensor(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != "f32") throw ConfigError("tensor '" + name + "' is not f32");
  const std::uint8_t* p = files_.at(e.file).data() + e.byte_offset;
  std::vector<float> data(shape_numel(e.shape));
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = read_raw<float>(p + 4 * i);
  return Tensor(e.shape, std::move(data));
}

IntTensor BlobReader::int_tensor(const std::string& name) const {
  const auto& e = entry(name);
  const std::uint8_t* p = files_.at(e.file).data() + e.byte_offset;
  std::vector<std::int32_t> data(shape_numel(e.shape));
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (e.dtype == "i8")
      data[i] = e.is_signed ? static_cast<std::int8_t>(p[i]) : static_cast<std::int32_t>(p[i]);
    else if (e.dtype == "i32")
      data[i] = read_raw<std::int32_t>(p + 4 * i);
    else
      throw ConfigError("tensor '" + name + "' is not an integer blob");
  }
  return IntTensor(e.shape, std::move(data), e.bits, e.is_signed);
}

void save_checkpoint(const FloatModel& model, const fs::path& dir) {
  model.validate();
  BlobWriter w;
  for (const auto& name : model.tensor_names()) w.add(name, model.tensor(name));
  w.write(dir);
  write_json_file(dir / "config.json", nlohmann::json(model.config));
}

FloatModel load_checkpoint(const fs::path& dir) {
  const ModelConfig cfg = read_json_file(dir / "config.json").get<ModelConfig>();
  BlobReader r(dir);
  FloatModel m = FloatModel::zeros(cfg);
  const auto names = m.tensor_names();
  if (r.entries().size() != names.size())
    throw ConfigError("checkpoint holds " + std::to_string(r.entries().size()) + " tensors, model needs " +
                      std::to_string(names.size()));
  for (const auto& name : names) {
    Tensor t = r.tensor(name);
    if (t.shape() != m.tensor(name).shape())
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                       shape_str(m.tensor(name).shape()));
    m.tensor(name) = std::move(t);
  }
  return m;
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace potvit
