#include "moppr/checkpoint.hpp"

#include <fstream>

#include "binary_io.hpp"
#include "moppr/config.hpp"

namespace moppr {

namespace {

constexpr char kCheckpointMagic[9] = "MOPPRCKP";
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const ParameterLayout layout = ParameterLayout::make(ckpt.config, ckpt.space);
  if (ckpt.params.size() != layout.size()) throw InvalidInput("checkpoint parameters do not match the layout");
  if (ckpt.accumulators && ckpt.accumulators->size() != layout.size())
    throw InvalidInput("checkpoint accumulators do not match the layout");

  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  auto describe = [&](const Parameters<float>& set, const std::string& group) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      const Mat<float>& t = set[static_cast<int>(i)];
      if (t.rows() != layout.shapes[i].first || t.cols() != layout.shapes[i].second)
        throw InvalidInput("tensor " + layout.names[i] + " has the wrong shape");
      manifest.push_back({{"group", group},
                          {"name", layout.names[i]},
                          {"shape", {t.rows(), t.cols()}},
                          {"offset", offset}});
      offset += static_cast<std::uint64_t>(t.size()) * sizeof(float);
    }
  };
  describe(ckpt.params, "params");
  if (ckpt.accumulators) describe(*ckpt.accumulators, "adagrad");

  nlohmann::json header = {{"model", ckpt.config}, {"space", ckpt.space},       {"step", ckpt.step},
                           {"seed", ckpt.seed},    {"tensors", manifest},       {"data_bytes", offset}};
  const std::string text = header.dump();

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(kCheckpointMagic, 8);
    bin::put<std::uint32_t>(out, kCheckpointVersion);
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    auto dump = [&](const Parameters<float>& set) {
      for (const auto& t : set.tensors) bin::put_array(out, t.data(), static_cast<std::size_t>(t.size()));
    };
    dump(ckpt.params);
    if (ckpt.accumulators) dump(*ckpt.accumulators);
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  // Rename so an interrupted write never clobbers the previous checkpoint.
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  bin::expect_magic(in, kCheckpointMagic, "checkpoint " + path.string());
  const auto version = bin::get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = bin::get<std::uint32_t>(in, "header length");
  std::string text(header_len, '\0');
  bin::get_array(in, text.data(), header_len, "header");

  Checkpoint ckpt;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    ckpt.config = header.at("model").get<ModelConfig>();
    ckpt.space = header.at("space").get<FeatureSpace>();
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.seed = header.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  const ParameterLayout layout = ParameterLayout::make(ckpt.config, ckpt.space);
  const auto& tensors = header.at("tensors");
  Parameters<float> params, acc;
  std::uint64_t offset = 0;
  for (const auto& entry : tensors) {
    const std::string group = entry.at("group").get<std::string>();
    const std::string name = entry.at("name").get<std::string>();
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    if (entry.at("offset").get<std::uint64_t>() != offset) throw IoError("checkpoint manifest offsets out of order");
    Parameters<float>& dst = group == "params" ? params : acc;
    const std::size_t i = dst.size();
    if (group != "params" && group != "adagrad") throw IoError("unknown tensor group " + group);
    if (i >= layout.size() || layout.names[i] != name || layout.shapes[i].first != rows ||
        layout.shapes[i].second != cols)
      throw IoError("checkpoint tensor " + name + " does not match the model layout");
    Mat<float> t(rows, cols);
    bin::get_array(in, t.data(), static_cast<std::size_t>(t.size()), "tensor " + name);
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(float);
    dst.tensors.push_back(std::move(t));
  }
  if (params.size() != layout.size()) throw IoError("checkpoint is missing parameter tensors");
  if (acc.size() != 0 && acc.size() != layout.size()) throw IoError("checkpoint has partial optimizer state");
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in checkpoint " + path.string());
  ckpt.params = std::move(params);
  if (acc.size() > 0) ckpt.accumulators = std::move(acc);
  return ckpt;
}

}  // namespace moppr
