#include "dpt/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "json.hpp"

namespace dpt {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

// ---- PNM ----------------------------------------------------------------------

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
bool next_token(const std::string& buf, std::size_t& pos, std::string& token) {
  token.clear();
  while (pos < buf.size()) {
    const char c = buf[pos];
    if (c == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++pos;
    } else {
      break;
    }
  }
  while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) token.push_back(buf[pos++]);
  return !token.empty();
}

int header_int(const std::string& buf, std::size_t& pos, const fs::path& path, const char* what) {
  std::string tok;
  if (!next_token(buf, pos, tok)) throw IngestionError(path.string() + ": truncated header (" + what + ")");
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw IngestionError(path.string() + ": malformed header field " + what + " '" + tok + "'");
  }
}

}  // namespace

ImageTensor read_pnm(const fs::path& path) {
  std::string buf;
  try {
    buf = read_text(path);
  } catch (const IoError& e) {
    throw IngestionError(e.what());
  }
  std::size_t pos = 0;
  std::string magic;
  if (!next_token(buf, pos, magic) || (magic != "P5" && magic != "P6")) {
    throw IngestionError(path.string() + ": not a binary PGM/PPM file");
  }
  const int channels = magic == "P5" ? 1 : 3;
  const int width = header_int(buf, pos, path, "width");
  const int height = header_int(buf, pos, path, "height");
  const int maxval = header_int(buf, pos, path, "maxval");
  if (maxval != 255) throw IngestionError(path.string() + ": only 8-bit images (maxval 255) are supported");
  if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos]))) {
    throw IngestionError(path.string() + ": truncated header");
  }
  ++pos;
  const std::size_t expected = static_cast<std::size_t>(width) * height * channels;
  if (buf.size() - pos != expected) {
    throw IngestionError(path.string() + ": payload has " + std::to_string(buf.size() - pos) + " bytes, expected " +
                         std::to_string(expected));
  }
  std::vector<double> data(expected);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < channels; ++c) {
        const auto byte = static_cast<unsigned char>(buf[pos + (static_cast<std::size_t>(y) * width + x) * channels + c]);
        data[(static_cast<std::size_t>(c) * height + y) * width + x] = byte / 255.0;
      }
    }
  }
  return ImageTensor(channels, height, width, std::move(data));
}

namespace {

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); }

void write_pnm_bytes(const fs::path& path, int channels, int width, int height, const std::string& payload) {
  std::string out = (channels == 1 ? "P5\n" : "P6\n") + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out += payload;
  write_text(path, out);
}

}  // namespace

void write_pnm(const fs::path& path, const ImageTensor& image) {
  if (image.channels != 1 && image.channels != 3) throw FormatError("PNM output needs 1 or 3 channels");
  std::string payload;
  payload.reserve(image.data.size());
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < image.channels; ++c) payload.push_back(static_cast<char>(to_byte(image.at(c, y, x))));
    }
  }
  write_pnm_bytes(path, image.channels, image.width, image.height, payload);
}

void write_pgm(const fs::path& path, const Matrix& values) {
  std::string payload;
  payload.reserve(static_cast<std::size_t>(values.size()));
  for (Index y = 0; y < values.rows(); ++y) {
    for (Index x = 0; x < values.cols(); ++x) payload.push_back(static_cast<char>(to_byte(values(y, x))));
  }
  write_pnm_bytes(path, 1, static_cast<int>(values.cols()), static_cast<int>(values.rows()), payload);
}

// ---- datasets -----------------------------------------------------------------------

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].split == split) out.push_back(i);
  }
  return out;
}

void Dataset::validate() const {
  if (class_names.empty()) throw DataError("dataset has no classes");
  std::vector<int> train_counts(class_names.size(), 0);
  for (const auto& item : items) {
    if (item.label < 0 || item.label >= num_classes()) {
      throw DataError("dataset item " + item.path + " has label " + std::to_string(item.label) + " outside 0.." +
                      std::to_string(num_classes() - 1));
    }
    if (item.split == Split::train) ++train_counts[static_cast<std::size_t>(item.label)];
  }
  for (std::size_t k = 0; k < class_names.size(); ++k) {
    if (train_counts[k] == 0) throw DataError("class '" + class_names[k] + "' has no training items");
  }
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  json doc;
  try {
    doc = json::parse(read_text(manifest_path));
  } catch (const IoError& e) {
    throw IngestionError(e.what());
  } catch (const json::exception& e) {
    throw IngestionError(manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  ds.root = dir;
  try {
    ds.name = doc.value("name", std::string("dataset"));
    ds.class_names = doc.at("classes").get<std::vector<std::string>>();
    for (const auto& it : doc.at("items")) {
      DatasetItem item;
      item.path = it.at("path").get<std::string>();
      item.label = it.at("label").get<int>();
      item.caption = it.value("caption", std::string());
      const auto split = it.at("split").get<std::string>();
      if (split != "train" && split != "test") throw IngestionError(manifest_path.string() + ": bad split '" + split + "'");
      item.split = split == "train" ? Split::train : Split::test;
      ds.items.push_back(std::move(item));
    }
  } catch (const json::exception& e) {
    throw IngestionError(manifest_path.string() + ": " + e.what());
  }
  try {
    ds.validate();
  } catch (const DataError& e) {
    throw IngestionError(manifest_path.string() + ": " + e.what());
  }
  ds.images.reserve(ds.items.size());
  for (const auto& item : ds.items) ds.images.push_back(read_pnm(dir / item.path));
  return ds;
}

void write_manifest(const fs::path& path, const Dataset& dataset) {
  json doc;
  doc["name"] = dataset.name;
  doc["classes"] = dataset.class_names;
  json items = json::array();
  for (const auto& item : dataset.items) {
    items.push_back({{"path", item.path},
                     {"label", item.label},
                     {"caption", item.caption},
                     {"split", item.split == Split::train ? "train" : "test"}});
  }
  doc["items"] = std::move(items);
  write_text(path, doc.dump(1) + "\n");
}

// ---- text resources ---------------------------------------------------------------------

Vocab load_vocab(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::string> words;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw IngestionError(path.string() + ": empty line " + std::to_string(words.size() + 1));
    words.push_back(line);
  }
  for (std::size_t i = 0; i < std::size(Vocab::kReserved); ++i) {
    if (i >= words.size() || words[i] != Vocab::kReserved[i]) {
      throw IngestionError(path.string() + ": line " + std::to_string(i + 1) + " must be " +
                           std::string(Vocab::kReserved[i]));
    }
  }
  return Vocab(words);
}

void save_vocab(const fs::path& path, const Vocab& vocab) {
  std::string out;
  for (const auto& w : vocab.words()) out += w + "\n";
  write_text(path, out);
}

namespace {

PromptSpec spec_from_json(const json& j) {
  PromptSpec s;
  s.dataset_name = j.at("dataset").get<std::string>();
  s.template_text = j.at("template").get<std::string>();
  s.nctx = j.at("nctx").get<int>();
  s.class_position = parse_class_position(j.value("class_position", std::string("end")));
  s.modality = j.value("modality", std::string());
  s.validate();
  return s;
}

json spec_to_json(const PromptSpec& s) {
  json j = {{"dataset", s.dataset_name},
            {"template", s.template_text},
            {"nctx", s.nctx},
            {"class_position", to_string(s.class_position)}};
  if (!s.modality.empty()) j["modality"] = s.modality;
  return j;
}

json parse_json_file(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const IoError& e) {
    throw IngestionError(e.what());
  } catch (const json::exception& e) {
    throw IngestionError(path.string() + ": malformed JSON: " + e.what());
  }
}

}  // namespace

std::vector<PromptSpec> load_templates(const fs::path& path) {
  const json doc = parse_json_file(path);
  if (!doc.is_array()) throw IngestionError(path.string() + ": expected a JSON array of prompt specs");
  std::vector<PromptSpec> out;
  try {
    for (const auto& j : doc) out.push_back(spec_from_json(j));
  } catch (const json::exception& e) {
    throw IngestionError(path.string() + ": " + e.what());
  }
  return out;
}

PromptSpec parse_prompt_spec(const std::string& json_text) {
  try {
    return spec_from_json(json::parse(json_text));
  } catch (const json::exception& e) {
    throw IngestionError(std::string("prompt spec: ") + e.what());
  }
}

void save_templates(const fs::path& path, const std::vector<PromptSpec>& specs) {
  json doc = json::array();
  for (const auto& s : specs) doc.push_back(spec_to_json(s));
  write_text(path, doc.dump(1) + "\n");
}

PromptBank load_prompt_bank(const fs::path& path) {
  const json doc = parse_json_file(path);
  PromptBank bank;
  try {
    for (const auto& c : doc.at("classes")) {
      const auto name = c.at("name").get<std::string>();
      if (std::find(bank.class_names.begin(), bank.class_names.end(), name) != bank.class_names.end()) {
        throw IngestionError(path.string() + ": class '" + name + "' listed twice");
      }
      bank.class_names.push_back(name);
      bank.prompts.push_back(c.at("prompts").get<std::vector<std::string>>());
    }
  } catch (const json::exception& e) {
    throw IngestionError(path.string() + ": " + e.what());
  }
  return bank;
}

PromptBank load_prompt_bank(const fs::path& path, const std::vector<std::string>& classes, bool strict) {
  try {
    return load_prompt_bank(path).validated(classes, strict);
  } catch (const IngestionError& e) {
    throw IngestionError(path.string() + ": " + e.what());
  }
}

void save_prompt_bank(const fs::path& path, const PromptBank& bank) {
  json classes = json::array();
  for (std::size_t i = 0; i < bank.class_names.size(); ++i) {
    classes.push_back({{"name", bank.class_names[i]}, {"prompts", bank.prompts[i]}});
  }
  write_text(path, json{{"classes", classes}}.dump(1) + "\n");
}

LambdaTable load_lambda_table(const fs::path& path) {
  const json doc = parse_json_file(path);
  LambdaTable table;
  try {
    for (const auto& [dataset, cells] : doc.items()) {
      for (const auto& [bench, cell] : cells.items()) {
        if (cell.is_null()) continue;  // reported as "-"
        table.set(dataset, parse_benchmark(bench), {cell.at("lambda1").get<double>(), cell.at("lambda2").get<double>()});
      }
    }
  } catch (const json::exception& e) {
    throw IngestionError(path.string() + ": " + e.what());
  }
  return table;
}

// ---- weights ----------------------------------------------------------------------------

namespace {

template <class T>
void put(std::string& out, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& buf, const fs::path& path) : buf_(buf), path_(path) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw FormatError(path_.string() + ": truncated weight file");
  }
  const std::string& buf_;
  const fs::path& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_weights(const fs::path& path, const NamedMatrices& leaves) {
  std::string out(kWeightMagic, sizeof(kWeightMagic));
  put<std::uint32_t>(out, kWeightVersion);
  for (const auto& [name, m] : leaves) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  write_text(path, out);
}

NamedMatrices load_weights(const fs::path& path) {
  const std::string buf = read_text(path);
  Reader r(buf, path);
  if (r.bytes(4) != std::string(kWeightMagic, 4)) throw FormatError(path.string() + ": bad magic, not a DPTW file");
  const auto version = r.get<std::uint32_t>();
  if (version != kWeightVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  NamedMatrices leaves;
  while (!r.done()) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.bytes(name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank < 1 || rank > 2) throw FormatError(path.string() + ": leaf '" + name + "' has unsupported rank");
    std::uint64_t rows = 1, cols = r.get<std::uint64_t>();
    if (rank == 2) {
      rows = cols;
      cols = r.get<std::uint64_t>();
    }
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    const std::string payload = r.bytes(sizeof(double) * rows * cols);
    std::memcpy(m.data(), payload.data(), payload.size());
    leaves.emplace_back(std::move(name), std::move(m));
  }
  return leaves;
}

namespace {

Matrix config_row(const ModelConfig& c) {
  Matrix m(1, 14);
  m << c.vocab_size, c.context_window, c.text_width, c.text_layers, c.text_heads, c.vision_width, c.vision_layers,
      c.vision_heads, c.channels, c.patch, c.image_size, c.mlp_ratio, c.feature_dim, c.ln_eps;
  return m;
}

ModelConfig config_from_row(const Matrix& m, const fs::path& path) {
  if (m.rows() != 1 || m.cols() != 14) throw FormatError(path.string() + ": malformed meta.config leaf");
  ModelConfig c;
  int* fields[] = {&c.vocab_size, &c.context_window, &c.text_width, &c.text_layers,  &c.text_heads,
                   &c.vision_width, &c.vision_layers, &c.vision_heads, &c.channels, &c.patch,
                   &c.image_size,  &c.mlp_ratio,     &c.feature_dim};
  for (Index i = 0; i < 13; ++i) *fields[i] = static_cast<int>(m(0, i));
  c.ln_eps = m(0, 13);
  return c;
}

}  // namespace

void save_model(const fs::path& path, const ModelParams& params) {
  NamedMatrices leaves;
  leaves.emplace_back("meta.config", config_row(params.config));
  for (const auto& [name, t] : params.named_tensors()) leaves.emplace_back(name, t->value);
  save_weights(path, leaves);
}

ModelParams load_model(const fs::path& path) {
  const NamedMatrices leaves = load_weights(path);
  if (leaves.empty() || leaves.front().first != "meta.config") {
    throw FormatError(path.string() + ": missing meta.config leaf");
  }
  ModelParams params;
  try {
    params = init_model(config_from_row(leaves.front().second, path), 0);
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  auto named = params.named_tensors();
  if (leaves.size() != named.size() + 1) throw FormatError(path.string() + ": leaf count does not match the model");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, m] = leaves[i + 1];
    Tensor* t = named[i].second;
    if (name != named[i].first) throw FormatError(path.string() + ": expected leaf '" + named[i].first + "', found '" + name + "'");
    if (m.rows() != t->rows() || m.cols() != t->cols()) throw FormatError(path.string() + ": leaf '" + name + "' has the wrong shape");
    t->value = m;
  }
  return params;
}

void save_context(const fs::path& path, const ContextVectors& ctx) {
  NamedMatrices leaves;
  leaves.emplace_back("meta.context_init", Matrix::Constant(1, 1, ctx.init_source == ContextInit::template_words ? 0.0 : 1.0));
  leaves.emplace_back("context.v", ctx.v.value);
  save_weights(path, leaves);
}

ContextVectors load_context(const fs::path& path) {
  const NamedMatrices leaves = load_weights(path);
  if (leaves.size() != 2 || leaves[0].first != "meta.context_init" || leaves[1].first != "context.v") {
    throw FormatError(path.string() + ": not a context-vector file");
  }
  ContextVectors ctx;
  ctx.init_source = leaves[0].second(0, 0) == 0.0 ? ContextInit::template_words : ContextInit::random;
  ctx.v = Tensor(leaves[1].second, true);
  return ctx;
}

std::uint64_t hash_file(const fs::path& path) {
  const std::string buf = read_text(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : buf) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---- config ----------------------------------------------------------------------------

std::map<std::string, std::string> parse_config(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (!out.emplace(key, value).second) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key " + key);
  }
  return out;
}

std::map<std::string, std::string> read_config(const fs::path& path) {
  try {
    return parse_config(read_text(path));
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace dpt
