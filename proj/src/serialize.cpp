#include "branchkit/serialize.hpp"

#include <bit>
#include <fstream>
#include <map>

#include "json.hpp"

namespace branchkit::nn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; byte swapping is not implemented");

void save_checkpoint(const ParamMap& params, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "branchkit-checkpoint-v1";
  manifest["data_file"] = "params.bin";
  manifest["tensors"] = nlohmann::json::array();

  std::ofstream blob(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw std::runtime_error("save_checkpoint: cannot write " + (dir / "params.bin").string());
  std::int64_t offset = 0;
  for (const auto& [name, tensor] : params) {
    manifest["tensors"].push_back({{"name", name},
                                   {"shape", tensor.shape()},
                                   {"dtype", "f64"},
                                   {"byte_offset", offset}});
    const auto& v = tensor.data();
    blob.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double)));
    offset += static_cast<std::int64_t>(v.size() * sizeof(double));
  }
  blob.close();

  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw std::runtime_error("save_checkpoint: cannot write manifest");
  mf << manifest.dump(2) << "\n";
}

void load_checkpoint(ParamMap& params, const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("load_checkpoint: missing " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(mf);

  std::map<std::string, Tensor*> by_name;
  for (auto& [name, tensor] : params) by_name[name] = &tensor;

  std::ifstream blob(dir / manifest.value("data_file", "params.bin"), std::ios::binary);
  if (!blob) throw std::runtime_error("load_checkpoint: missing blob file");
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name");
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw std::runtime_error("load_checkpoint: unknown parameter '" + name + "'");
    }
    const ad::Shape shape = entry.at("shape").get<ad::Shape>();
    if (shape != it->second->shape()) {
      throw std::runtime_error("load_checkpoint: shape mismatch for '" + name + "': file " +
                               ad::shape_str(shape) + " vs model " +
                               ad::shape_str(it->second->shape()));
    }
    if (entry.at("dtype") != "f64") {
      throw std::runtime_error("load_checkpoint: unsupported dtype for '" + name + "'");
    }
    auto& v = it->second->data();
    blob.seekg(entry.at("byte_offset").get<std::int64_t>());
    blob.read(reinterpret_cast<char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!blob) throw std::runtime_error("load_checkpoint: short read for '" + name + "'");
  }
}

}  // namespace branchkit::nn
