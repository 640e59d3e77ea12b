#include "msdet/arch.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "msdet/receptive_field.hpp"

namespace msdet {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::pool: return "pool";
    case LayerKind::upsample: return "upsample";
    case LayerKind::erd: return "erd";
    case LayerKind::spp: return "spp";
    case LayerKind::pcam: return "pcam";
    case LayerKind::add: return "add";
    case LayerKind::concat: return "concat";
  }
  return "?";
}

LayerSpec LayerSpec::conv(std::size_t k, std::size_t s, std::size_t p, std::size_t r, std::size_t channels) {
  LayerSpec l;
  l.kind = LayerKind::conv;
  l.k = k;
  l.s = s;
  l.p = p;
  l.r = r;
  l.channels = channels;
  return l;
}

LayerSpec LayerSpec::pool(std::size_t k, std::size_t s, std::size_t p) {
  LayerSpec l;
  l.kind = LayerKind::pool;
  l.k = k;
  l.s = s;
  l.p = p;
  return l;
}

LayerSpec LayerSpec::upsample(std::size_t f) {
  LayerSpec l;
  l.kind = LayerKind::upsample;
  l.f = f;
  return l;
}

long ArchConfig::tap_layer(const std::string& name) const {
  for (const auto& t : taps) {
    if (t.name == name) return t.layer;
  }
  throw ConfigError("unknown tap '" + name + "'");
}

void ArchConfig::validate() const {
  if (input_size == 0) throw ConfigError("input size must be positive");
  if (input_channels == 0) throw ConfigError("input channels must be positive");
  std::set<std::string> names;
  for (const auto& t : taps) {
    if (t.layer < -1 || t.layer >= static_cast<long>(layers.size())) {
      throw ConfigError("tap '" + t.name + "' references layer " + std::to_string(t.layer) + " but only " +
                        std::to_string(layers.size()) + " layers exist");
    }
    if (!names.insert(t.name).second) throw ConfigError("duplicate tap '" + t.name + "'");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
    if (l.k == 0 || l.s == 0 || l.r == 0 || l.f == 0) throw ConfigError(where + ": k, s, r and f must be >= 1");
    for (const std::string* ref : {&l.from, &l.with}) {
      if (ref->empty()) continue;
      const long at = tap_layer(*ref);
      if (at >= static_cast<long>(i)) {
        throw ConfigError(where + ": tap '" + *ref + "' is not defined before this layer");
      }
    }
    if ((l.kind == LayerKind::add || l.kind == LayerKind::concat) && l.with.empty()) {
      throw ConfigError(where + ": needs with=<tap>");
    }
    if (l.kind == LayerKind::erd && l.rates.empty()) throw ConfigError(where + ": needs at least one rate");
  }
}

std::size_t layer_resolution(std::size_t h, const LayerSpec& spec) {
  switch (spec.kind) {
    case LayerKind::conv:
    case LayerKind::pool: {
      const std::size_t rf = effective_rf(spec.kind == LayerKind::conv ? spec.r : 1, spec.k);
      const long numer = static_cast<long>(h + 2 * spec.p) - static_cast<long>(rf);
      if (numer < 0) {
        throw ConfigError(std::string(layer_kind_name(spec.kind)) + ": input " + std::to_string(h) + " with padding " +
                          std::to_string(spec.p) + " is smaller than receptive field " + std::to_string(rf));
      }
      return static_cast<std::size_t>(numer) / spec.s + 1;
    }
    case LayerKind::upsample: return h * spec.f;
    default: return h;
  }
}

namespace {

struct FlowState {
  std::size_t h = 0;
  std::size_t channels = 0;
  std::size_t rf = 1;
  double jump = 1.0;
};

struct Walk {
  FlowState input;
  std::vector<FlowState> states;
  RFReport report;
};

Walk walk(const ArchConfig& config) {
  config.validate();
  Walk w;
  w.input = {config.input_size, config.input_channels, 1, 1.0};
  w.report.input_size = config.input_size;
  std::vector<bool> collapsed(config.targets.size(), false);

  auto state_of = [&](const std::string& tap) -> const FlowState& {
    const long at = config.tap_layer(tap);
    return at < 0 ? w.input : w.states[static_cast<std::size_t>(at)];
  };

  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const LayerSpec& l = config.layers[i];
    const FlowState src = !l.from.empty() ? state_of(l.from) : (i == 0 ? w.input : w.states[i - 1]);
    const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
    LayerReport row;
    row.idx = i;
    row.kind = l.kind;
    FlowState out = src;
    try {
      switch (l.kind) {
        case LayerKind::conv:
        case LayerKind::pool: {
          const std::size_t r = l.kind == LayerKind::conv ? l.r : 1;
          row.k = l.k;
          row.s = l.s;
          row.p = l.p;
          row.r = r;
          row.rf_layer = effective_rf(r, l.k);
          out.h = layer_resolution(src.h, l);
          if ((src.h + 2 * l.p - row.rf_layer) % l.s != 0) {
            w.report.warnings.push_back(where + ": (h + 2p - RF) = " + std::to_string(src.h + 2 * l.p - row.rf_layer) +
                                        " is not divisible by stride " + std::to_string(l.s) +
                                        "; trailing border is dropped");
          }
          if (l.kind == LayerKind::conv && l.channels) out.channels = l.channels;
          out.jump = src.jump * static_cast<double>(l.s);
          break;
        }
        case LayerKind::upsample:
          row.rf_layer = 1;
          out.h = layer_resolution(src.h, l);
          out.jump = src.jump / static_cast<double>(l.f);
          break;
        case LayerKind::erd: {
          row.k = 3;
          for (auto r : l.rates) row.branch_rfs.push_back(effective_rf(r, 3));
          row.branch_rfs.push_back(1);  // 1×1 branch
          row.branch_rfs.push_back(1);  // identity
          row.rf_layer = *std::max_element(row.branch_rfs.begin(), row.branch_rfs.end());
          row.r = *std::max_element(l.rates.begin(), l.rates.end());
          row.p = same_padding(row.r, 3);
          if (l.channels && l.channels != src.channels) {
            throw ConfigError("identity branch needs " + std::to_string(src.channels) + " output channels, got " +
                              std::to_string(l.channels));
          }
          break;
        }
        case LayerKind::spp: {
          row.branch_rfs.push_back(1);
          for (auto k : l.pools) row.branch_rfs.push_back(k);
          row.rf_layer = *std::max_element(row.branch_rfs.begin(), row.branch_rfs.end());
          row.k = row.rf_layer;
          row.p = (row.rf_layer - 1) / 2;
          if (l.channels) out.channels = l.channels;
          break;
        }
        case LayerKind::pcam:
          // Both attention maps span every position of the input map.
          row.rf_layer = src.h;
          row.branch_rfs = {src.h, src.h};
          break;
        case LayerKind::add:
        case LayerKind::concat: {
          const FlowState& other = state_of(l.with);
          if (other.h != src.h) {
            throw ConfigError("operand sizes differ: " + std::to_string(src.h) + " vs tap '" + l.with + "' " +
                              std::to_string(other.h));
          }
          if (l.kind == LayerKind::add && other.channels != src.channels) {
            throw ConfigError("channel counts differ: " + std::to_string(src.channels) + " vs tap '" + l.with +
                              "' " + std::to_string(other.channels));
          }
          if (l.kind == LayerKind::concat) out.channels = src.channels + other.channels;
          row.rf_layer = 1;
          out.rf = std::max(src.rf, other.rf);
          break;
        }
      }
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    } catch (const TensorError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    if (l.kind != LayerKind::add && l.kind != LayerKind::concat) {
      const double span = static_cast<double>(row.rf_layer - 1) * src.jump;
      out.rf = src.rf + static_cast<std::size_t>(span + 0.5);
    }
    row.h = out.h;
    row.channels = out.channels;
    row.rf_composed = out.rf;
    row.jump = out.jump;
    w.states.push_back(out);
    w.report.layers.push_back(row);

    for (std::size_t t = 0; t < config.targets.size(); ++t) {
      if (!collapsed[t] && config.targets[t] / out.jump < 1.0) {
        collapsed[t] = true;
        std::ostringstream os;
        os << "target of " << config.targets[t] << " px collapses below one cell at layer " << i << " (jump "
           << out.jump << ")";
        w.report.warnings.push_back(os.str());
      }
    }
  }
  return w;
}

std::size_t to_size(const LayerRecord& rec, std::string_view name, std::size_t fallback) {
  auto v = rec.field(name);
  if (!v) return fallback;
  const long x = parse_int(*v, name);
  if (x < 0) throw ConfigError("line " + std::to_string(rec.line) + ": field " + std::string(name) + " must be >= 0");
  return static_cast<std::size_t>(x);
}

}  // namespace

RFReport compose_rf(const ArchConfig& config) { return walk(config).report; }

std::vector<TapShape> trace_shapes(const ArchConfig& config) {
  const Walk w = walk(config);
  std::vector<TapShape> out;
  for (const auto& t : config.taps) {
    const FlowState& s = t.layer < 0 ? w.input : w.states[static_cast<std::size_t>(t.layer)];
    out.push_back({t.name, t.layer, s.h, s.h, s.channels, s.jump});
  }
  return out;
}

ArchConfig arch_from_doc(const ConfigDoc& doc) {
  ArchConfig cfg;
  const long input = doc.get_int("input", 0);
  if (input <= 0) throw ConfigError("architecture config needs 'input = <size>'");
  cfg.input_size = static_cast<std::size_t>(input);
  const long channels = doc.get_int("channels", 3);
  if (channels <= 0) throw ConfigError("'channels' must be positive");
  cfg.input_channels = static_cast<std::size_t>(channels);
  if (auto t = doc.get("target")) cfg.targets = parse_double_list(*t, "target");

  static const std::map<std::string, std::pair<LayerKind, std::set<std::string>>> kinds = {
      {"conv", {LayerKind::conv, {"k", "s", "p", "r", "c", "from"}}},
      {"pool", {LayerKind::pool, {"k", "s", "p", "from"}}},
      {"upsample", {LayerKind::upsample, {"f", "from"}}},
      {"erd", {LayerKind::erd, {"c", "rates", "from"}}},
      {"spp", {LayerKind::spp, {"c", "pools", "from"}}},
      {"pcam", {LayerKind::pcam, {"from"}}},
      {"add", {LayerKind::add, {"with", "from"}}},
      {"concat", {LayerKind::concat, {"with", "from"}}},
  };
  for (const auto& rec : doc.layers) {
    const std::string at = "line " + std::to_string(rec.line) + ": ";
    auto it = kinds.find(rec.kind);
    if (it == kinds.end()) throw ConfigError(at + "unknown layer kind '" + rec.kind + "'");
    const auto& [kind, allowed] = it->second;
    for (const auto& [name, value] : rec.fields) {
      if (!allowed.count(name)) throw ConfigError(at + "field '" + name + "' does not apply to " + rec.kind);
    }
    LayerSpec l;
    l.kind = kind;
    try {
      if (kind == LayerKind::conv || kind == LayerKind::pool) {
        if (!rec.field("k")) throw ConfigError("missing kernel size k");
        l.k = to_size(rec, "k", 1);
        l.s = to_size(rec, "s", 1);
        l.p = to_size(rec, "p", 0);
        l.r = to_size(rec, "r", 1);
      }
      if (kind == LayerKind::upsample) {
        if (!rec.field("f")) throw ConfigError("missing upsample factor f");
        l.f = to_size(rec, "f", 1);
      }
      l.channels = to_size(rec, "c", 0);
      if (kind == LayerKind::erd) {
        l.rates.clear();
        for (long r : parse_int_list(rec.field("rates").value_or("1,3,5"), "rates")) {
          if (r < 1) throw ConfigError("dilation rates must be >= 1");
          l.rates.push_back(static_cast<std::size_t>(r));
        }
      }
      if (kind == LayerKind::spp) {
        auto pools = parse_int_list(rec.field("pools").value_or("5,9,13"), "pools");
        if (pools.size() != 3) throw ConfigError("spp needs exactly three pool sizes");
        for (std::size_t i = 0; i < 3; ++i) {
          if (pools[i] < 1 || pools[i] % 2 == 0) throw ConfigError("spp pool sizes must be odd and positive");
          l.pools[i] = static_cast<std::size_t>(pools[i]);
        }
      }
      l.from = rec.field("from").value_or("");
      l.with = rec.field("with").value_or("");
    } catch (const ConfigError& e) {
      throw ConfigError(at + e.what());
    }
    cfg.layers.push_back(std::move(l));
  }
  for (const auto& t : doc.taps) cfg.taps.push_back({t.name, t.layer});
  cfg.validate();
  return cfg;
}

std::string arch_to_text(const ArchConfig& config) {
  std::ostringstream os;
  os << "input = " << config.input_size << "\n";
  os << "channels = " << config.input_channels << "\n";
  if (!config.targets.empty()) {
    os << "target = ";
    for (std::size_t i = 0; i < config.targets.size(); ++i) os << (i ? "," : "") << config.targets[i];
    os << "\n";
  }
  std::multimap<long, std::string> taps_at;
  for (const auto& t : config.taps) taps_at.emplace(t.layer, t.name);
  auto emit_taps = [&](long layer) {
    auto [b, e] = taps_at.equal_range(layer);
    for (auto it = b; it != e; ++it) os << "tap " << it->second << "\n";
  };
  emit_taps(-1);
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const auto& l = config.layers[i];
    os << "layer " << layer_kind_name(l.kind);
    switch (l.kind) {
      case LayerKind::conv:
        os << " k=" << l.k << " s=" << l.s << " p=" << l.p;
        if (l.r != 1) os << " r=" << l.r;
        break;
      case LayerKind::pool: os << " k=" << l.k << " s=" << l.s << " p=" << l.p; break;
      case LayerKind::upsample: os << " f=" << l.f; break;
      case LayerKind::erd:
        os << " rates=";
        for (std::size_t j = 0; j < l.rates.size(); ++j) os << (j ? "," : "") << l.rates[j];
        break;
      case LayerKind::spp: os << " pools=" << l.pools[0] << "," << l.pools[1] << "," << l.pools[2]; break;
      default: break;
    }
    if (l.channels && (l.kind == LayerKind::conv || l.kind == LayerKind::erd || l.kind == LayerKind::spp)) {
      os << " c=" << l.channels;
    }
    if (!l.with.empty()) os << " with=" << l.with;
    if (!l.from.empty()) os << " from=" << l.from;
    os << "\n";
    emit_taps(static_cast<long>(i));
  }
  return os.str();
}

namespace {

std::string jump_str(double j) {
  std::ostringstream os;
  os << j;
  return os.str();
}

}  // namespace

std::string format_report_table(const RFReport& report) {
  std::ostringstream os;
  os << "input " << report.input_size << "x" << report.input_size << "\n";
  os << std::left << std::setw(5) << "idx" << std::setw(10) << "kind" << std::right << std::setw(4) << "k"
     << std::setw(4) << "s" << std::setw(4) << "p" << std::setw(4) << "r" << std::setw(7) << "H" << std::setw(7)
     << "C" << std::setw(10) << "rf_layer" << std::setw(13) << "rf_composed" << std::setw(8) << "jump"
     << "  branches\n";
  for (const auto& l : report.layers) {
    os << std::left << std::setw(5) << l.idx << std::setw(10) << layer_kind_name(l.kind) << std::right
       << std::setw(4) << l.k << std::setw(4) << l.s << std::setw(4) << l.p << std::setw(4) << l.r
       << std::setw(7) << l.h << std::setw(7) << l.channels << std::setw(10) << l.rf_layer << std::setw(13)
       << l.rf_composed << std::setw(8) << jump_str(l.jump);
    if (!l.branch_rfs.empty()) {
      os << "  ";
      for (std::size_t i = 0; i < l.branch_rfs.size(); ++i) os << (i ? "," : "") << l.branch_rfs[i];
    }
    os << "\n";
  }
  for (const auto& w : report.warnings) os << "warning: " << w << "\n";
  return os.str();
}

std::string format_report_csv(const RFReport& report) {
  std::ostringstream os;
  os << "idx,kind,k,s,p,r,H,rf_layer,rf_composed,jump\n";
  for (const auto& l : report.layers) {
    os << l.idx << ',' << layer_kind_name(l.kind) << ',' << l.k << ',' << l.s << ',' << l.p << ',' << l.r << ','
       << l.h << ',' << l.rf_layer << ',' << l.rf_composed << ',' << jump_str(l.jump) << "\n";
  }
  return os.str();
}

std::string format_shape_table(const std::vector<TapShape>& shapes) {
  std::ostringstream os;
  for (const auto& s : shapes) {
    os << std::left << std::setw(10) << s.name << std::right << s.h << "x" << s.w << "x" << s.channels
       << "  (stride " << jump_str(s.jump) << ")\n";
  }
  return os.str();
}

}  // namespace msdet
