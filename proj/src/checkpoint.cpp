#include "fesnet/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <map>
#include <sstream>

namespace fesnet {

namespace {

using Kind = CheckpointError::Kind;

constexpr const char* kMagic = "FESNET-CHECKPOINT";

template <std::size_t N>
std::string join(const std::array<int, N>& v) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

template <std::size_t N>
std::array<int, N> split_ints(const std::string& text, const std::string& key) {
  std::vector<std::string> items;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) items.push_back(item);
  std::array<int, N> out{};
  bool ok = items.size() == N;
  for (std::size_t i = 0; ok && i < N; ++i) {
    ok = !items[i].empty() &&
         items[i].find_first_not_of("0123456789") == std::string::npos;
    if (ok) out[i] = std::stoi(items[i]);
  }
  if (!ok) {
    throw CheckpointError(Kind::Format, "config." + key + " expects " +
                                            std::to_string(N) +
                                            " comma-separated integers, got '" +
                                            text + "'");
  }
  return out;
}

std::string dims_string(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_dims(const std::string& text) {
  Shape s;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, 'x')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw CheckpointError(Kind::Format, "bad tensor dims '" + text + "'");
    }
    s.push_back(static_cast<std::size_t>(std::stoull(item)));
  }
  if (s.empty()) throw CheckpointError(Kind::Format, "empty tensor dims");
  return s;
}

void append_floats(std::string& out, const Tensor<float>& t) {
  const std::size_t start = out.size();
  out.resize(start + 4 * t.size());
  char* dst = out.data() + start;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int b = 0; b < 4; ++b) {
      dst[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    }
  }
}

Tensor<float> read_floats(const char* src, const Shape& shape) {
  Tensor<float> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * i + b]))
              << (8 * b);
    }
    t[i] = std::bit_cast<float>(bits);
  }
  return t;
}

std::vector<std::pair<std::string, std::string>> config_lines(
    const FesNetConfig& c) {
  return {
      {"in_channels", std::to_string(c.in_channels)},
      {"stem_channels", std::to_string(c.stem_channels)},
      {"pcb_channels", join(c.pcb_channels)},
      {"head_channels", join(c.head_channels)},
      {"feb_channels", join(c.feb_channels)},
      {"fuse_channels", std::to_string(c.fuse_channels)},
      {"classes", std::to_string(c.classes)},
      {"down_dilation", std::to_string(c.down_dilation)},
      {"wiring", to_string(c.wiring)},
      {"conv_kernel", "3"},
      {"head_kernel", std::to_string(FesNetConfig::kHeadStride)},
      {"head_stride", std::to_string(FesNetConfig::kHeadStride)},
  };
}

int parse_int(const std::string& text, const std::string& key) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(text, &used);
    if (used == text.size()) return static_cast<int>(v);
  } catch (const std::exception&) {
  }
  throw CheckpointError(Kind::Format, key + " expects an integer, got '" + text + "'");
}

std::int64_t parse_i64(const std::string& text, const std::string& key) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw CheckpointError(Kind::Format, key + " expects an integer, got '" + text + "'");
}

void apply_config(FesNetConfig& c, const std::string& key, const std::string& value) {
  if (key == "in_channels") c.in_channels = parse_int(value, key);
  else if (key == "stem_channels") c.stem_channels = parse_int(value, key);
  else if (key == "pcb_channels") c.pcb_channels = split_ints<4>(value, key);
  else if (key == "head_channels") c.head_channels = split_ints<2>(value, key);
  else if (key == "feb_channels") c.feb_channels = split_ints<4>(value, key);
  else if (key == "fuse_channels") c.fuse_channels = parse_int(value, key);
  else if (key == "classes") c.classes = parse_int(value, key);
  else if (key == "down_dilation") c.down_dilation = parse_int(value, key);
  else if (key == "wiring") {
    try {
      c.wiring = parse_pcb_wiring(value);
    } catch (const Error& e) {
      throw CheckpointError(Kind::Format, e.what());
    }
  } else if (key == "conv_kernel") {
    if (parse_int(value, key) != 3) {
      throw CheckpointError(Kind::Format, "unsupported conv kernel " + value);
    }
  } else if (key == "head_kernel" || key == "head_stride") {
    if (parse_int(value, key) != FesNetConfig::kHeadStride) {
      throw CheckpointError(Kind::Format, "unsupported " + key + " " + value);
    }
  } else {
    throw CheckpointError(Kind::Format, "unknown config key '" + key + "'");
  }
}

}  // namespace

Checkpoint make_checkpoint(FesNet<float>& model, const CheckpointMeta& meta,
                           const std::vector<AdamState<float>>* adam) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.meta = meta;
  ParamSet<float> set = model.parameters();
  for (const auto& p : set.all()) ckpt.tensors.push_back({p.name, *p.value});
  if (adam) {
    if (adam->size() != set.trainable.size()) {
      throw Error("optimizer state has " + std::to_string(adam->size()) +
                  " entries for " + std::to_string(set.trainable.size()) +
                  " trainable tensors");
    }
    for (std::size_t i = 0; i < adam->size(); ++i) {
      ckpt.optimizer.push_back({"adam.m:" + set.trainable[i].name, (*adam)[i].m});
      ckpt.optimizer.push_back({"adam.v:" + set.trainable[i].name, (*adam)[i].v});
    }
    ckpt.adam_step = adam->empty() ? 0 : adam->front().t;
  }
  return ckpt;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream head;
  head << kMagic << '\n' << "format_version " << kCheckpointVersion << '\n';
  for (const auto& [k, v] : config_lines(ckpt.config)) {
    head << "config." << k << ' ' << v << '\n';
  }
  head << "meta.seed " << ckpt.meta.seed << '\n'
       << "meta.epoch " << ckpt.meta.epoch << '\n'
       << "meta.step " << ckpt.meta.step << '\n'
       << "meta.target_width " << ckpt.meta.target_width << '\n'
       << "meta.zscore " << (ckpt.meta.per_channel_zscore ? "per_channel" : "joint") << '\n'
       << "meta.rng " << ckpt.meta.rng << '\n'
       << "meta.adam_step " << ckpt.adam_step << '\n';
  std::string payload;
  auto emit = [&](const NamedTensor& t) {
    if (t.name.find_first_of(" \n") != std::string::npos) {
      throw Error("tensor name '" + t.name + "' contains whitespace");
    }
    head << "tensor " << t.name << ' ' << dims_string(t.value.shape()) << '\n';
    append_floats(payload, t.value);
  };
  for (const auto& t : ckpt.tensors) emit(t);
  for (const auto& t : ckpt.optimizer) emit(t);
  head << "end_header " << payload.size() << '\n';
  return head.str() + payload;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  Checkpoint ckpt;
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) {
      throw CheckpointError(Kind::Truncated, "checkpoint header ends early");
    }
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (bytes.rfind(kMagic, 0) != 0) {
    throw CheckpointError(Kind::Format, "not a fesnet checkpoint (bad magic)");
  }
  if (next_line() != kMagic) {
    throw CheckpointError(Kind::Format, "not a fesnet checkpoint (bad magic)");
  }
  {
    const std::string line = next_line();
    const std::string prefix = "format_version ";
    if (line.rfind(prefix, 0) != 0) {
      throw CheckpointError(Kind::Format, "missing format_version line");
    }
    const int version = parse_int(line.substr(prefix.size()), "format_version");
    if (version != kCheckpointVersion) {
      throw CheckpointError(Kind::Version,
                            "checkpoint format version " + std::to_string(version) +
                                " is not supported (expected " +
                                std::to_string(kCheckpointVersion) + ")");
    }
  }
  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> entries;
  std::size_t payload_bytes = 0;
  bool ended = false;
  while (!ended) {
    const std::string line = next_line();
    const auto sp = line.find(' ');
    if (sp == std::string::npos) {
      throw CheckpointError(Kind::Format, "malformed header line '" + line + "'");
    }
    const std::string key = line.substr(0, sp);
    const std::string value = line.substr(sp + 1);
    if (key.rfind("config.", 0) == 0) {
      apply_config(ckpt.config, key.substr(7), value);
    } else if (key == "meta.seed") {
      if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos) {
        throw CheckpointError(Kind::Format, "meta.seed expects an unsigned integer");
      }
      ckpt.meta.seed = std::stoull(value);
    } else if (key == "meta.epoch") {
      ckpt.meta.epoch = parse_i64(value, key);
    } else if (key == "meta.step") {
      ckpt.meta.step = parse_i64(value, key);
    } else if (key == "meta.target_width") {
      ckpt.meta.target_width = parse_i64(value, key);
    } else if (key == "meta.zscore") {
      if (value != "joint" && value != "per_channel") {
        throw CheckpointError(Kind::Format, "meta.zscore must be joint or per_channel");
      }
      ckpt.meta.per_channel_zscore = value == "per_channel";
    } else if (key == "meta.rng") {
      ckpt.meta.rng = value;
    } else if (key == "meta.adam_step") {
      ckpt.adam_step = parse_i64(value, key);
    } else if (key == "tensor") {
      const auto sp2 = value.find(' ');
      if (sp2 == std::string::npos) {
        throw CheckpointError(Kind::Format, "malformed tensor line '" + line + "'");
      }
      entries.push_back({value.substr(0, sp2), parse_dims(value.substr(sp2 + 1))});
    } else if (key == "end_header") {
      payload_bytes = static_cast<std::size_t>(parse_i64(value, key));
      ended = true;
    } else {
      throw CheckpointError(Kind::Format, "unknown header key '" + key + "'");
    }
  }
  try {
    ckpt.config.validate();
  } catch (const Error& e) {
    throw CheckpointError(Kind::Format, std::string("invalid model config: ") + e.what());
  }
  std::size_t expected = 0;
  for (const auto& e : entries) expected += 4 * shape_volume(e.shape);
  if (expected != payload_bytes) {
    throw CheckpointError(Kind::Format,
                          "header declares " + std::to_string(payload_bytes) +
                              " payload bytes but its tensors need " +
                              std::to_string(expected));
  }
  const std::size_t available = bytes.size() - pos;
  if (available < payload_bytes) {
    throw CheckpointError(Kind::Truncated,
                          "checkpoint truncated: payload has " +
                              std::to_string(available) + " of " +
                              std::to_string(payload_bytes) + " bytes");
  }
  if (available > payload_bytes) {
    throw CheckpointError(Kind::Format, "trailing bytes after checkpoint payload");
  }
  const char* src = bytes.data() + pos;
  for (auto& e : entries) {
    NamedTensor t{e.name, read_floats(src, e.shape)};
    src += 4 * t.value.size();
    if (t.name.rfind("adam.", 0) == 0) {
      ckpt.optimizer.push_back(std::move(t));
    } else {
      ckpt.tensors.push_back(std::move(t));
    }
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(Kind::Io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(Kind::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw CheckpointError(Kind::Io, "cannot move checkpoint into place at " +
                                        path.string() + ": " + ec.message());
  }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::Io, "cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_checkpoint(ss.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), path.string() + ": " + e.what());
  }
}

void load_checkpoint_into(const Checkpoint& ckpt, FesNet<float>& model,
                          std::vector<AdamState<float>>* adam) {
  std::map<std::string, const Tensor<float>*> stored;
  for (const auto& t : ckpt.tensors) stored[t.name] = &t.value;
  for (const auto& t : ckpt.optimizer) stored[t.name] = &t.value;

  auto lookup = [&](const std::string& name, const Shape& shape) {
    auto it = stored.find(name);
    if (it == stored.end()) {
      throw CheckpointError(Kind::MissingTensor, "checkpoint lacks tensor " + name);
    }
    if (it->second->shape() != shape) {
      throw CheckpointError(Kind::ShapeMismatch,
                            "tensor " + name + " has shape " +
                                shape_string(it->second->shape()) +
                                " in the checkpoint but the model expects " +
                                shape_string(shape));
    }
    return it->second;
  };

  ParamSet<float> set = model.parameters();
  // Validate everything before mutating the model.
  for (const auto& p : set.all()) lookup(p.name, p.value->shape());
  if (adam) {
    if (ckpt.optimizer.empty()) {
      throw CheckpointError(Kind::MissingTensor, "checkpoint has no optimizer state");
    }
    for (const auto& p : set.trainable) {
      lookup("adam.m:" + p.name, p.value->shape());
      lookup("adam.v:" + p.name, p.value->shape());
    }
  }
  for (const auto& p : set.all()) *p.value = *lookup(p.name, p.value->shape());
  if (adam) {
    adam->clear();
    for (const auto& p : set.trainable) {
      AdamState<float> s(p.value->shape());
      s.m = *lookup("adam.m:" + p.name, p.value->shape());
      s.v = *lookup("adam.v:" + p.name, p.value->shape());
      s.t = ckpt.adam_step;
      adam->push_back(std::move(s));
    }
  }
}

FesNet<float> model_from_checkpoint(const Checkpoint& ckpt) {
  FesNet<float> model(ckpt.config);
  load_checkpoint_into(ckpt, model);
  return model;
}

}  // namespace fesnet
