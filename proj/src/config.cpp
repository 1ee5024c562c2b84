#include "tpn/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "tpn/errors.hpp"

namespace tpn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

Shape parse_shape(const std::string& key, const std::string& v) {
  Shape shape;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, 'x')) shape.push_back(parse_size(key, trim(part)));
  if (shape.empty()) throw ConfigError("'" + key + "' expects dims like 3x84x84, got '" + v + "'");
  return shape;
}

std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
  KeyValueConfig kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

KeyValueConfig KeyValueConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_)
    if (k == key) {
      v = value;
      return;
    }
  entries_.emplace_back(key, value);
}

bool KeyValueConfig::has(const std::string& key) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
}

const std::string& KeyValueConfig::get(const std::string& key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return v;
  throw ConfigError("missing config key '" + key + "'");
}

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k{
      "n_way",       "k_train",     "k_test",     "queries",          "alpha",     "k_graph",
      "lr0",         "halve_every", "max_episodes", "checkpoint_every", "loss_scope", "variant",
      "input_shape", "embed_dim",   "hidden",     "filters",          "seed"};
  return k;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "n_way") n_way = parse_size(key, value);
  else if (key == "k_train") k_train = parse_size(key, value);
  else if (key == "k_test") k_test = parse_size(key, value);
  else if (key == "queries") queries = parse_size(key, value);
  else if (key == "alpha") alpha = parse_double(key, value);
  else if (key == "k_graph") k_graph = parse_size(key, value);
  else if (key == "lr0") lr0 = parse_double(key, value);
  else if (key == "halve_every") halve_every = parse_size(key, value);
  else if (key == "max_episodes") max_episodes = parse_size(key, value);
  else if (key == "checkpoint_every") checkpoint_every = parse_size(key, value);
  else if (key == "loss_scope") loss_scope = parse_loss_scope(value);
  else if (key == "variant") net.variant = parse_variant(value);
  else if (key == "input_shape") net.input_shape = parse_shape(key, value);
  else if (key == "embed_dim") net.embed_dim = parse_size(key, value);
  else if (key == "hidden") net.hidden = parse_size(key, value);
  else if (key == "filters") net.filters = parse_size(key, value);
  else if (key == "seed") seed = parse_size(key, value);
  else {
    std::string valid;
    for (const auto& k : keys()) valid += (valid.empty() ? "" : ", ") + k;
    throw ConfigError("unknown training config key '" + key + "' (valid: " + valid + ")");
  }
}

void TrainConfig::apply(const KeyValueConfig& kv) {
  for (const auto& [k, v] : kv.entries()) set(k, v);
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig cfg;
  cfg.apply(KeyValueConfig::parse(text));
  return cfg;
}

void TrainConfig::validate() const {
  if (n_way < 2) throw ConfigError("n_way must be at least 2");
  if (k_train < 1 || k_test < 1) throw ConfigError("shot counts must be positive");
  if (queries < n_way || queries % n_way != 0) throw ConfigError("queries must be a positive multiple of n_way");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (k_graph < 1) throw ConfigError("k_graph must be positive");
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (net.input_shape.empty()) throw ConfigError("input_shape is not set");
  if (net.variant == EmbeddingVariant::kMlp && (net.embed_dim == 0 || net.hidden == 0))
    throw ConfigError("MLP widths must be positive");
  if (net.variant == EmbeddingVariant::kConv4 && net.filters == 0) throw ConfigError("filters must be positive");
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "n_way = " << n_way << "\n"
     << "k_train = " << k_train << "\n"
     << "k_test = " << k_test << "\n"
     << "queries = " << queries << "\n"
     << "alpha = " << format_double(alpha) << "\n"
     << "k_graph = " << k_graph << "\n"
     << "lr0 = " << format_double(lr0) << "\n"
     << "halve_every = " << halve_every << "\n"
     << "max_episodes = " << max_episodes << "\n"
     << "checkpoint_every = " << checkpoint_every << "\n"
     << "loss_scope = " << to_string(loss_scope) << "\n"
     << "variant = " << to_string(net.variant) << "\n"
     << "input_shape = " << shape_text(net.input_shape) << "\n"
     << "embed_dim = " << net.embed_dim << "\n"
     << "hidden = " << net.hidden << "\n"
     << "filters = " << net.filters << "\n"
     << "seed = " << seed << "\n";
  return os.str();
}

std::array<std::uint8_t, 32> TrainConfig::fingerprint() const {
  TrainConfig canon = *this;
  canon.max_episodes = 0;
  canon.checkpoint_every = 0;
  const std::string text = canon.to_text();
  std::array<std::uint8_t, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size())
    throw std::runtime_error("SHA-256 digest failed");
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string hex(std::span<const std::uint8_t> bytes) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : bytes) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

}  // namespace tpn
