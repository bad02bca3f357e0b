#include "gdream/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "gdream/error.hpp"

namespace gdream {

namespace {

constexpr char kMagic[8] = {'G', 'D', 'R', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

bool same_tensors(const std::map<std::string, ag::Matrix>& a, const std::map<std::string, ag::Matrix>& b) {
  if (a.size() != b.size()) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.rows() != ib->second.rows() || ia->second.cols() != ib->second.cols()) {
      return false;
    }
    // Bitwise, so that NaN payloads and signed zeros count.
    if (std::memcmp(ia->second.data(), ib->second.data(), sizeof(double) * ia->second.size()) != 0) return false;
  }
  return true;
}

struct Section {
  const char* name;
  std::map<std::string, ag::Matrix>* tensors;
};

}  // namespace

bool AdamState::operator==(const AdamState& o) const {
  return step == o.step && same_tensors(m, o.m) && same_tensors(v, o.v);
}

bool Checkpoint::operator==(const Checkpoint& o) const {
  return config == o.config && schedule == o.schedule && step == o.step && meta == o.meta && adam == o.adam &&
         same_tensors(params, o.params);
}

Checkpoint initial_checkpoint(const DenoiserConfig& config, const NoiseSchedule& schedule, std::uint64_t seed) {
  Checkpoint c;
  c.config = config;
  c.schedule = schedule;
  store_params(c, Denoiser(config, seed));
  c.meta["init_seed"] = seed;
  return c;
}

Denoiser make_denoiser(const Checkpoint& checkpoint) {
  ParameterSet params;
  for (const auto& [name, value] : checkpoint.params) params.add(name, value);
  return Denoiser(checkpoint.config, std::move(params));
}

void store_params(Checkpoint& checkpoint, const Denoiser& model) {
  checkpoint.params.clear();
  for (const auto& [name, var] : model.params().all()) checkpoint.params.emplace(name, var.value());
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  Checkpoint& c = const_cast<Checkpoint&>(checkpoint);
  const Section sections[] = {{"params", &c.params}, {"adam_m", &c.adam.m}, {"adam_v", &c.adam.v}};

  nlohmann::json header;
  header["config"] = checkpoint.config;
  header["schedule"] = checkpoint.schedule;
  header["step"] = checkpoint.step;
  header["adam_step"] = checkpoint.adam.step;
  header["meta"] = checkpoint.meta;
  std::uint64_t offset = 0;
  for (const auto& section : sections) {
    nlohmann::json index = nlohmann::json::array();
    for (const auto& [name, m] : *section.tensors) {
      index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
      offset += static_cast<std::uint64_t>(m.size());
    }
    header["tensors"][section.name] = index;
  }
  header["values"] = offset;
  const std::string text = header.dump();

  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + path + "'");
    const std::uint64_t size = text.size();
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
    out.write(reinterpret_cast<const char*>(&size), sizeof(size));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& section : sections) {
      for (const auto& [name, m] : *section.tensors) {
        out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
      }
    }
    if (!out) throw FormatError("write failed for '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t size = 0;
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError("'" + path + "' is not a checkpoint");
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in '" + path + "'");
  }
  in.read(reinterpret_cast<char*>(&size), sizeof(size));
  if (!in || size > (1u << 30)) throw FormatError("corrupt checkpoint header in '" + path + "'");
  std::string text(size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(size));
  if (!in) throw FormatError("truncated checkpoint header in '" + path + "'");

  Checkpoint c;
  try {
    const auto header = nlohmann::json::parse(text);
    c.config = header.at("config").get<DenoiserConfig>();
    c.schedule = header.at("schedule").get<NoiseSchedule>();
    c.step = header.at("step").get<std::int64_t>();
    c.adam.step = header.at("adam_step").get<std::int64_t>();
    c.meta = header.at("meta");
    const Section sections[] = {{"params", &c.params}, {"adam_m", &c.adam.m}, {"adam_v", &c.adam.v}};
    for (const auto& section : sections) {
      for (const auto& entry : header.at("tensors").at(section.name)) {
        const auto rows = entry.at("rows").get<Eigen::Index>();
        const auto cols = entry.at("cols").get<Eigen::Index>();
        if (rows < 0 || cols < 0) throw FormatError("negative tensor shape");
        ag::Matrix m(rows, cols);
        in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
        if (!in) throw FormatError("truncated tensor data");
        section.tensors->emplace(entry.at("name").get<std::string>(), std::move(m));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt checkpoint header in '" + path + "': " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()) + " in '" + path + "'");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing data in checkpoint '" + path + "'");
  return c;
}

}  // namespace gdream
