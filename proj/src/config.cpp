#include "fuseseg/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fuseseg {

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: bad boolean for " + key + ": '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    std::size_t eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value: '" + s + "'");
    }
    std::string key = trim(s.substr(0, eq));
    std::string val = trim(s.substr(eq + 1));
    try {
      if (key == "seed") {
        cfg.seed = std::stoull(val);
      } else if (key == "patch") {
        cfg.patch = std::stoi(val);
      } else if (key == "batch") {
        cfg.batch = std::stoi(val);
      } else if (key == "epochs_pretrain") {
        cfg.epochs_pretrain = std::stoi(val);
      } else if (key == "epochs_fusion") {
        cfg.epochs_fusion = std::stoi(val);
      } else if (key == "lr_fusion") {
        cfg.lr_fusion = std::stod(val);
      } else if (key == "lr_seg") {
        cfg.lr_seg = std::stod(val);
      } else if (key == "lambda_adv") {
        cfg.lambda_adv = std::stod(val);
      } else if (key == "sigma") {
        cfg.sigma = std::stod(val);
      } else if (key == "lambda_fuse") {
        cfg.lambda_fuse = std::stod(val);
      } else if (key == "alpha_ce") {
        cfg.alpha_ce = std::stod(val);
      } else if (key == "beta_dice") {
        cfg.beta_dice = std::stod(val);
      } else if (key == "channels_low") {
        cfg.channels_low = std::stoi(val);
      } else if (key == "channels_high") {
        cfg.channels_high = std::stoi(val);
      } else if (key == "no_decoder") {
        cfg.no_decoder = parse_bool(val, key);
      } else if (key == "no_adv_pretrain") {
        cfg.no_adv_pretrain = parse_bool(val, key);
      } else if (key == "no_adv_coop") {
        cfg.no_adv_coop = parse_bool(val, key);
      } else if (key == "no_cross_attention") {
        cfg.no_cross_attention = parse_bool(val, key);
      } else if (key == "freeze_fusion") {
        cfg.freeze_fusion = parse_bool(val, key);
      } else if (key == "seg_input") {
        cfg.seg_input = val;
      } else {
        throw ConfigError("config: unknown key '" + key + "'");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("config: bad value for " + key + ": '" + val + "'");
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return from_text(os.str());
}

void RunConfig::validate() const {
  if (patch <= 0 || patch % 8 != 0) {
    throw ConfigError("config: patch must be a positive multiple of 8, got " + std::to_string(patch));
  }
  if (batch <= 0 || epochs_pretrain < 0 || epochs_fusion < 0) {
    throw ConfigError("config: batch/epochs must be positive");
  }
  if (lr_fusion <= 0.0 || lr_seg <= 0.0) throw ConfigError("config: learning rates must be positive");
  if (sigma < 0.0 || sigma > 1.0) throw ConfigError("config: sigma must lie in [0,1]");
  if (lambda_adv < 0.0 || lambda_fuse < 0.0 || alpha_ce < 0.0 || beta_dice < 0.0) {
    throw ConfigError("config: loss weights must be nonnegative");
  }
  if (channels_low <= 0 || channels_high <= 0 || channels_high % 2 != 0) {
    throw ConfigError("config: channels_low > 0 and channels_high positive even required");
  }
  if (seg_input != "fused" && seg_input != "m1" && seg_input != "m2") {
    throw ConfigError("config: seg_input must be fused|m1|m2, got '" + seg_input + "'");
  }
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os << "seed=" << seed << '\n';
  os << "patch=" << patch << '\n';
  os << "batch=" << batch << '\n';
  os << "epochs_pretrain=" << epochs_pretrain << '\n';
  os << "epochs_fusion=" << epochs_fusion << '\n';
  os << "lr_fusion=" << fmt_double(lr_fusion) << '\n';
  os << "lr_seg=" << fmt_double(lr_seg) << '\n';
  os << "lambda_adv=" << fmt_double(lambda_adv) << '\n';
  os << "sigma=" << fmt_double(sigma) << '\n';
  os << "lambda_fuse=" << fmt_double(lambda_fuse) << '\n';
  os << "alpha_ce=" << fmt_double(alpha_ce) << '\n';
  os << "beta_dice=" << fmt_double(beta_dice) << '\n';
  os << "channels_low=" << channels_low << '\n';
  os << "channels_high=" << channels_high << '\n';
  os << "no_decoder=" << (no_decoder ? "true" : "false") << '\n';
  os << "no_adv_pretrain=" << (no_adv_pretrain ? "true" : "false") << '\n';
  os << "no_adv_coop=" << (no_adv_coop ? "true" : "false") << '\n';
  os << "no_cross_attention=" << (no_cross_attention ? "true" : "false") << '\n';
  os << "freeze_fusion=" << (freeze_fusion ? "true" : "false") << '\n';
  os << "seg_input=" << seg_input << '\n';
  return os.str();
}

losses::LossWeights RunConfig::loss_weights() const {
  losses::LossWeights w;
  w.lambda_adv = lambda_adv;
  w.sigma = sigma;
  w.lambda_fuse = lambda_fuse;
  w.alpha_ce = alpha_ce;
  w.beta_dice = beta_dice;
  return w;
}

models::FusionConfig RunConfig::fusion_config() const {
  models::FusionConfig fc;
  fc.channels_low = channels_low;
  fc.channels_high = channels_high;
  fc.cross_attention = !no_cross_attention;
  fc.use_decoder = !no_decoder;
  return fc;
}

models::SegConfig RunConfig::seg_config() const { return models::SegConfig{}; }

}  // namespace fuseseg
