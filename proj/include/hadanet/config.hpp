#pragma once

// Flat `key = value` config files (UTF-8, '#' comments) and the training
// configuration with its documented defaults. Command-line flags override
// file values; flags win.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace hadanet {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct AnalysisError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": expected `key = value`");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
      kv.values_[key] = value;
    }
    return kv;
  }

  void set(const std::string& key, const std::string& value) {
    values_[key] = value;
  }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& dflt) const {
    const auto it = values_.find(key);
    return it == values_.end() ? dflt : it->second;
  }

  long get_int(const std::string& key, long dflt) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      std::size_t pos = 0;
      const long v = std::stol(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key `" + key + "`: not an integer: `" +
                        it->second + "`");
    }
  }

  double get_real(const std::string& key, double dflt) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key `" + key + "`: not a number: `" +
                        it->second + "`");
    }
  }

  bool get_bool(const std::string& key, bool dflt) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key `" + key + "`: not a bool: `" + it->second +
                      "`");
  }

  const std::map<std::string, std::string>& raw() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

// Every key below has a default; a config file or flags only need to name
// what they change.
struct TrainConfig {
  // optimization protocol
  int epochs = 60;
  int batch = 128;
  float lr = 0.005f;         // initial learning rate
  float lr_decay = 0.1f;     // multiplied in every decay period
  int lr_decay_period = 15;  // epochs between decays
  std::uint64_t seed = 1;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;

  // binarization aggression for the inner layers (first/last stay at 1)
  int beta_w = 4;
  int beta_a = 4;

  // LeNet variant
  int conv1_filters = 20;
  int conv2_filters = 50;
  int fc_hidden = 500;
  int kernel = 5;
  int pool = 2;

  // data
  std::string data_dir;  // empty -> HADANET_DATA_DIR -> ./data
  bool synthetic = false;
  int train_limit = 0;  // 0 = use everything
  int test_limit = 0;
  int synthetic_train = 12000;
  int synthetic_test = 2000;

  // execution
  int workers = 1;
  bool packed_inference = false;

  static TrainConfig from_keyvalues(const KeyValues& kv) {
    TrainConfig c;
    c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs));
    c.batch = static_cast<int>(kv.get_int("batch", c.batch));
    c.lr = static_cast<float>(kv.get_real("lr", c.lr));
    c.lr_decay = static_cast<float>(kv.get_real("lr_decay", c.lr_decay));
    c.lr_decay_period =
        static_cast<int>(kv.get_int("lr_decay_period", c.lr_decay_period));
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long>(c.seed)));
    c.adam_beta1 = static_cast<float>(kv.get_real("adam_beta1", c.adam_beta1));
    c.adam_beta2 = static_cast<float>(kv.get_real("adam_beta2", c.adam_beta2));
    c.adam_eps = static_cast<float>(kv.get_real("adam_eps", c.adam_eps));
    c.beta_w = static_cast<int>(kv.get_int("beta_w", c.beta_w));
    c.beta_a = static_cast<int>(kv.get_int("beta_a", c.beta_a));
    c.conv1_filters =
        static_cast<int>(kv.get_int("conv1_filters", c.conv1_filters));
    c.conv2_filters =
        static_cast<int>(kv.get_int("conv2_filters", c.conv2_filters));
    c.fc_hidden = static_cast<int>(kv.get_int("fc_hidden", c.fc_hidden));
    c.kernel = static_cast<int>(kv.get_int("kernel", c.kernel));
    c.pool = static_cast<int>(kv.get_int("pool", c.pool));
    c.data_dir = kv.get_str("data_dir", c.data_dir);
    c.synthetic = kv.get_bool("synthetic", c.synthetic);
    c.train_limit = static_cast<int>(kv.get_int("train_limit", c.train_limit));
    c.test_limit = static_cast<int>(kv.get_int("test_limit", c.test_limit));
    c.synthetic_train =
        static_cast<int>(kv.get_int("synthetic_train", c.synthetic_train));
    c.synthetic_test =
        static_cast<int>(kv.get_int("synthetic_test", c.synthetic_test));
    c.workers = static_cast<int>(kv.get_int("workers", c.workers));
    c.packed_inference =
        kv.get_bool("packed_inference", c.packed_inference);
    c.validate();
    return c;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (!(lr > 0.0f)) throw ConfigError("lr must be > 0");
    if (!(lr_decay > 0.0f && lr_decay <= 1.0f))
      throw ConfigError("lr_decay must be in (0,1]");
    if (lr_decay_period < 1) throw ConfigError("lr_decay_period must be >= 1");
    if (beta_w < 1 || beta_a < 1) throw ConfigError("beta must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (conv1_filters < 1 || conv2_filters < 1 || fc_hidden < 1 ||
        kernel < 1 || pool < 1)
      throw ConfigError("topology extents must be >= 1");
  }
};

// Step decay: lr(epoch) = lr0 * factor^floor(epoch / period).
inline float update_learning_rate(float lr0, int epoch,
                                  const TrainConfig& cfg) {
  float lr = lr0;
  for (int i = 0; i < epoch / cfg.lr_decay_period; ++i) lr *= cfg.lr_decay;
  return lr;
}

}  // namespace hadanet
