#include "defeat/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

namespace defeat {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::filesystem::path data_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

}  // namespace

void round_params_to_float(ParamStore& params) {
  for (auto& p : params)
    for (auto& v : p.data) v = static_cast<double>(static_cast<float>(v));
}

void save_checkpoint(const Detector& det, const std::filesystem::path& manifest_path, const nlohmann::json& meta) {
  const auto data_path = data_path_for(manifest_path);
  std::ofstream bin(data_path, std::ios::binary);
  if (!bin) throw IoError("cannot write " + data_path.string());
  nlohmann::json arrays = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : det.params()) {
    std::vector<float> buf(p.data.begin(), p.data.end());
    bin.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    arrays.push_back({{"name", p.name}, {"shape", p.shape}, {"dtype", "float32"}, {"byte_offset", offset}});
    offset += buf.size() * sizeof(float);
  }
  bin.close();
  if (!bin) throw IoError("write failed for " + data_path.string());

  const nlohmann::json manifest{{"config", det.config()},
                                {"data_file", data_path.filename().string()},
                                {"data_bytes", offset},
                                {"data_sha256", sha256_file(data_path)},
                                {"arrays", arrays},
                                {"meta", meta}};
  std::ofstream out(manifest_path);
  if (!out) throw IoError("cannot write " + manifest_path.string());
  out << manifest.dump(1) << '\n';
  if (!out) throw IoError("write failed for " + manifest_path.string());
}

Detector load_checkpoint(const std::filesystem::path& manifest_path, nlohmann::json* meta) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("missing checkpoint " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(manifest_path.string() + ": malformed JSON: " + e.what());
  }
  DetectorConfig cfg;
  try {
    cfg = manifest.at("config").get<DetectorConfig>();
  } catch (const std::exception& e) {
    throw LoadError(manifest_path.string() + ": bad config: " + e.what());
  }
  Detector det(cfg);

  const auto data_path = manifest_path.parent_path() / manifest.at("data_file").get<std::string>();
  if (manifest.contains("data_sha256") && sha256_file(data_path) != manifest.at("data_sha256").get<std::string>())
    throw LoadError(manifest_path.string() + ": checksum mismatch for " + data_path.filename().string());
  std::ifstream bin(data_path, std::ios::binary);
  if (!bin) throw IoError("missing checkpoint data " + data_path.string());
  const std::vector<char> bytes{std::istreambuf_iterator<char>(bin), std::istreambuf_iterator<char>()};

  const auto& arrays = manifest.at("arrays");
  if (arrays.size() != det.params().size())
    throw LoadError(manifest_path.string() + ": expected " + std::to_string(det.params().size()) + " arrays, found " +
                    std::to_string(arrays.size()));
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    auto& p = det.params()[i];
    const auto& rec = arrays[i];
    const auto name = rec.at("name").get<std::string>();
    if (name != p.name) throw LoadError(manifest_path.string() + ": array " + std::to_string(i) + " is '" + name +
                                        "', expected '" + p.name + "'");
    if (rec.at("shape").get<std::vector<int>>() != p.shape)
      throw LoadError(manifest_path.string() + ": shape mismatch for " + name);
    if (rec.at("dtype").get<std::string>() != "float32")
      throw LoadError(manifest_path.string() + ": unsupported dtype for " + name);
    const auto offset = rec.at("byte_offset").get<std::uint64_t>();
    if (offset + p.data.size() * sizeof(float) > bytes.size())
      throw LoadError(manifest_path.string() + ": data file too short for " + name);
    for (std::size_t k = 0; k < p.data.size(); ++k) {
      float f;
      std::memcpy(&f, bytes.data() + offset + k * sizeof(float), sizeof f);
      p.data[k] = f;
    }
  }
  if (meta) *meta = manifest.value("meta", nlohmann::json::object());
  return det;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

}  // namespace defeat
