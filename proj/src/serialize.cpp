#include "hiri/serialize.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace hiri {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

struct LineError {
  int line;
  ConfigError error(const std::string& what) const {
    return ConfigError("config line " + std::to_string(line) + ": " + what);
  }
};

Index parse_int(const std::string& text, const std::string& key, const LineError& at) {
  Index value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw at.error("'" + key + "' expects an integer, got '" + text + "'");
  return value;
}

bool parse_bool(const std::string& text, const std::string& key, const LineError& at) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw at.error("'" + key + "' expects true or false, got '" + text + "'");
}

template <typename Enum, std::size_t N>
Enum parse_enum(const std::string& text, const std::string& key, const Enum (&options)[N], const LineError& at) {
  for (Enum e : options) {
    if (text == to_string(e)) return e;
  }
  std::string allowed;
  for (Enum e : options) allowed += std::string(allowed.empty() ? "" : ", ") + to_string(e);
  throw at.error("'" + key + "' must be one of " + allowed + ", got '" + text + "'");
}

constexpr Family kFamilies[] = {Family::Hiri, Family::Mvit};
constexpr BlockKind kBlockKinds[] = {BlockKind::Hr, BlockKind::Cffn, BlockKind::Transformer};
constexpr StemKind kStemKinds[] = {StemKind::Hr, StemKind::Conv, StemKind::Vit};
constexpr DownsampleKind kDownsampleKinds[] = {DownsampleKind::IrdsA, DownsampleKind::IrdsB, DownsampleKind::Plain};
constexpr NormKind kNormKinds[] = {NormKind::Batch, NormKind::Layer};

StageSpec parse_stage(const std::string& value, std::size_t index, const LineError& at) {
  StageSpec s;
  s.resolution_divisor = Index{4} << index;
  std::set<std::string> seen;
  std::istringstream fields(value);
  std::string field;
  while (fields >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw at.error("stage field '" + field + "' is not key=value");
    const std::string key = field.substr(0, eq);
    const std::string v = field.substr(eq + 1);
    if (!seen.insert(key).second) throw at.error("stage field '" + key + "' given twice");
    if (key == "kind") {
      s.kind = parse_enum(v, key, kBlockKinds, at);
    } else if (key == "depth") {
      s.depth = parse_int(v, key, at);
    } else if (key == "channels") {
      s.channels = parse_int(v, key, at);
    } else if (key == "expansion") {
      s.expansion = parse_int(v, key, at);
    } else if (key == "heads") {
      s.heads = parse_int(v, key, at);
    } else if (key == "sr_ratio") {
      s.sr_ratio = parse_int(v, key, at);
    } else if (key == "conv_ffn") {
      s.conv_ffn = parse_bool(v, key, at);
    } else if (key == "ffn_norm") {
      s.ffn_norm = parse_enum(v, key, kNormKinds, at);
    } else if (key == "divisor") {
      s.resolution_divisor = parse_int(v, key, at);
    } else {
      throw at.error("unknown stage field '" + key + "'");
    }
  }
  for (const char* required : {"kind", "depth", "channels", "expansion"}) {
    if (!seen.contains(required)) throw at.error("stage record missing '" + std::string(required) + "'");
  }
  return s;
}

}  // namespace

ModelConfig parse_config(const std::string& text) {
  ModelConfig c;
  c.stem_width = 0;
  std::set<std::string> seen;
  std::istringstream lines(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(lines, raw)) {
    ++line_no;
    const LineError at{line_no};
    const std::string line = trim(std::string_view(raw).substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw at.error("expected 'key: value'");
    const std::string key = trim(std::string_view(line).substr(0, colon));
    const std::string value = trim(std::string_view(line).substr(colon + 1));
    if (key == "stage") {
      c.stages.push_back(parse_stage(value, c.stages.size(), at));
      continue;
    }
    if (!seen.insert(key).second) throw at.error("key '" + key + "' given twice");
    if (key == "name") {
      c.name = value;
    } else if (key == "family") {
      c.family = parse_enum(value, key, kFamilies, at);
    } else if (key == "resolution") {
      c.resolution = parse_int(value, key, at);
    } else if (key == "num_classes") {
      c.num_classes = parse_int(value, key, at);
    } else if (key == "stem") {
      c.stem = parse_enum(value, key, kStemKinds, at);
    } else if (key == "stem_width") {
      c.stem_width = parse_int(value, key, at);
    } else if (key == "downsample") {
      std::string item;
      std::istringstream items(value);
      while (std::getline(items, item, ',')) c.downsamplers.push_back(parse_enum(trim(item), key, kDownsampleKinds, at));
    } else if (key == "irds_a_expansion") {
      c.irds_a_expansion = parse_int(value, key, at);
    } else if (key == "irds_b_expansion") {
      c.irds_b_expansion = parse_int(value, key, at);
    } else {
      throw at.error("unknown key '" + key + "'");
    }
  }
  for (const char* required : {"name", "family", "resolution", "num_classes", "stem", "downsample"}) {
    if (!seen.contains(required)) throw ConfigError("config missing key '" + std::string(required) + "'");
  }
  if (c.stages.empty()) throw ConfigError("config has no stage records");
  if (!seen.contains("stem_width")) c.stem_width = c.stages.front().channels;
  c.validate();
  return c;
}

std::string format_config(const ModelConfig& c) {
  std::ostringstream out;
  out << "name: " << c.name << '\n';
  out << "family: " << to_string(c.family) << '\n';
  out << "resolution: " << c.resolution << '\n';
  out << "num_classes: " << c.num_classes << '\n';
  out << "stem: " << to_string(c.stem) << '\n';
  out << "stem_width: " << c.stem_width << '\n';
  out << "downsample: ";
  for (std::size_t i = 0; i < c.downsamplers.size(); ++i) out << (i ? ", " : "") << to_string(c.downsamplers[i]);
  out << '\n';
  out << "irds_a_expansion: " << c.irds_a_expansion << '\n';
  out << "irds_b_expansion: " << c.irds_b_expansion << '\n';
  for (const StageSpec& s : c.stages) {
    out << "stage: kind=" << to_string(s.kind) << " depth=" << s.depth << " channels=" << s.channels
        << " expansion=" << s.expansion;
    if (s.heads) out << " heads=" << *s.heads;
    out << " sr_ratio=" << s.sr_ratio << " conv_ffn=" << (s.conv_ffn ? "true" : "false")
        << " ffn_norm=" << to_string(s.ffn_norm) << " divisor=" << s.resolution_divisor << '\n';
  }
  return out.str();
}

ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

// --------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[4] = {'H', 'I', 'R', 'I'};

template <typename T>
void put_le(std::string& buf, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  std::size_t remaining() const { return data_.size() - pos_; }

  template <typename T>
  T get_le(const char* what) {
    need(sizeof(T), what);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return value;
  }

  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string_view out(data_.data() + pos_, n);
    pos_ += n;
    return out;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_records(std::ostream& out, const std::vector<NamedArray>& records) {
  std::string buf(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(buf, kCheckpointVersion);
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const NamedArray& r : records) {
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(r.name.size()));
    buf += r.name;
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(r.value.rank()));
    for (Index e : r.value.shape()) put_le<std::uint64_t>(buf, static_cast<std::uint64_t>(e));
    const std::size_t start = buf.size();
    for (double v : r.value.values()) put_le<std::uint64_t>(buf, std::bit_cast<std::uint64_t>(v));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data() + start), static_cast<uInt>(buf.size() - start));
  }
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(crc));
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("failed writing checkpoint");
}

std::vector<NamedArray> read_records(std::istream& in) {
  std::stringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());
  if (r.bytes(4, "magic") != std::string_view(kMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get_le<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));

  std::vector<NamedArray> records;
  uLong crc = crc32(0L, Z_NULL, 0);
  while (r.remaining() > 4) {
    NamedArray rec;
    const auto name_len = r.get_le<std::uint32_t>("name length");
    rec.name = std::string(r.bytes(name_len, "name"));
    const auto rank = r.get_le<std::uint32_t>("rank");
    if (rank > 8) throw FormatError(rec.name + ": implausible rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto e = r.get_le<std::uint64_t>("extent");
      if (e != 0 && count > (std::uint64_t{1} << 40) / e) throw FormatError(rec.name + ": extents overflow");
      count *= e;
      shape.push_back(static_cast<Index>(e));
    }
    if (count > r.remaining() / 8) throw FormatError("checkpoint truncated in payload of " + rec.name);
    const std::string_view payload = r.bytes(count * 8, "payload");
    crc = crc32(crc, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size()));
    rec.value = Array(shape);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[i * 8 + b])) << (8 * b);
      rec.value[static_cast<Index>(i)] = std::bit_cast<double>(bits);
    }
    records.push_back(std::move(rec));
  }
  const auto stored = r.get_le<std::uint32_t>("checksum");
  if (stored != static_cast<std::uint32_t>(crc)) throw FormatError("checkpoint checksum mismatch");
  return records;
}

void save_records(const std::vector<NamedArray>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_records(out, records);
}

std::vector<NamedArray> load_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_records(in);
}

void save_checkpoint(const ParamTree& tree, const std::filesystem::path& path) {
  std::vector<NamedArray> records;
  records.reserve(tree.size());
  for (const auto& e : tree) records.push_back({e.path, e.tensor.data()});
  save_records(records, path);
}

ParamTree load_checkpoint(const std::filesystem::path& path) {
  ParamTree tree;
  for (NamedArray& r : load_records(path)) tree.add(r.name, std::move(r.value), !is_buffer_name(r.name));
  return tree;
}

}  // namespace hiri
