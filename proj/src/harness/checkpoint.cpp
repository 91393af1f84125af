#include "gradinit/harness/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

namespace gi::harness {

using ad::Tensor;
using nlohmann::json;

namespace {

using Bits = std::conditional_t<sizeof(Real) == 8, std::uint64_t, std::uint32_t>;

const char* dtype_name() { return sizeof(Real) == 8 ? "float64" : "float32"; }

void put_le(std::vector<char>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

json entry(const std::string& name, const Shape& shape, std::uint64_t offset, std::uint64_t bytes) {
  return {{"name", name}, {"shape", shape}, {"offset", offset}, {"bytes", bytes}};
}

void append_tensor(std::vector<char>& payload, const Tensor& t) {
  for (Real v : t.data()) put_le(payload, std::bit_cast<Bits>(v), sizeof(Real));
}

struct Parsed {
  json header;
  std::vector<char> payload;
};

Parsed parse(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw IoError(path.string() + ": not a checkpoint (bad magic)");
  }
  const std::uint64_t h = get_le(bytes.data() + 8, 8);
  if (h > bytes.size() - 16) throw IoError(path.string() + ": header length exceeds file size");
  Parsed p;
  try {
    p.header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(h));
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": malformed header: " + e.what());
  }
  p.payload.assign(bytes.begin() + 16 + static_cast<std::ptrdiff_t>(h), bytes.end());
  return p;
}

Tensor read_tensor(const Parsed& p, const json& e, const Shape& expect, const std::string& name,
                   const std::filesystem::path& path) {
  if (e.at("name").get<std::string>() != name) {
    throw std::invalid_argument("checkpoint block '" + e.at("name").get<std::string>() + "' where model has '" +
                                name + "'");
  }
  if (e.at("shape").get<Shape>() != expect) throw std::invalid_argument("checkpoint shape mismatch at " + name);
  const auto offset = e.at("offset").get<std::uint64_t>(), nbytes = e.at("bytes").get<std::uint64_t>();
  std::int64_t count = 1;
  for (auto d : expect) count *= d;
  if (nbytes != static_cast<std::uint64_t>(count) * sizeof(Real) || offset + nbytes > p.payload.size()) {
    throw IoError(path.string() + ": payload range of " + name + " is inconsistent");
  }
  std::vector<Real> values(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = std::bit_cast<Real>(static_cast<Bits>(get_le(p.payload.data() + offset + i * sizeof(Real), sizeof(Real))));
  }
  return Tensor(expect, std::move(values));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nn::Model& model, const json& extra) {
  std::vector<char> payload;
  json blocks = json::array(), stats = json::array();
  for (const auto& b : model.blocks()) {
    const auto offset = payload.size();
    append_tensor(payload, b.tensor);
    json e = entry(b.name, b.tensor.shape(), offset, payload.size() - offset);
    e["role"] = nn::to_string(b.role);
    blocks.push_back(e);
  }
  for (std::size_t i = 0; i < model.batchnorm_layers(); ++i) {
    for (int which = 0; which < 2; ++which) {
      const Tensor& t = which == 0 ? model.running_mean()[i] : model.running_var()[i];
      const auto offset = payload.size();
      append_tensor(payload, t);
      stats.push_back(entry("bn" + std::to_string(i) + (which == 0 ? ".running_mean" : ".running_var"), t.shape(),
                            offset, payload.size() - offset));
    }
  }
  json header{{"format", "gradinit-checkpoint"},
              {"version", 1},
              {"dtype", dtype_name()},
              {"endianness", "little"},
              {"arch", nn::to_string(model.spec().kind)},
              {"blocks", blocks},
              {"running_stats", stats},
              {"meta", extra.is_null() ? json::object() : extra}};
  const std::string text = header.dump();
  std::vector<char> head(kCheckpointMagic, kCheckpointMagic + 8);
  put_le(head, text.size(), 8);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("short write to " + path.string());
}

json read_checkpoint_header(const std::filesystem::path& path) { return parse(path).header; }

void load_checkpoint(const std::filesystem::path& path, nn::Model& model) {
  const Parsed p = parse(path);
  try {
    if (p.header.at("dtype").get<std::string>() != dtype_name()) {
      throw std::invalid_argument("checkpoint dtype " + p.header.at("dtype").get<std::string>() + ", build uses " +
                                  dtype_name());
    }
    const json& blocks = p.header.at("blocks");
    if (blocks.size() != model.size()) throw std::invalid_argument("checkpoint block count differs from model");
    std::vector<Tensor> params;
    for (std::size_t i = 0; i < model.size(); ++i) {
      const auto& b = model.blocks()[i];
      params.push_back(read_tensor(p, blocks[i], b.tensor.shape(), b.name, path));
    }
    const json& stats = p.header.at("running_stats");
    if (stats.size() != 2 * model.batchnorm_layers()) {
      throw std::invalid_argument("checkpoint running statistics differ from model");
    }
    std::vector<Tensor> mean, var;
    for (std::size_t i = 0; i < model.batchnorm_layers(); ++i) {
      const std::string base = "bn" + std::to_string(i);
      mean.push_back(read_tensor(p, stats[2 * i], model.running_mean()[i].shape(), base + ".running_mean", path));
      var.push_back(read_tensor(p, stats[2 * i + 1], model.running_var()[i].shape(), base + ".running_var", path));
    }
    model.set_params(params);
    model.set_running_stats(std::move(mean), std::move(var));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed header: " + e.what());
  }
}

}  // namespace gi::harness
