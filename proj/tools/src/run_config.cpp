#include "loupe_cli/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "loupe/error.hpp"

namespace loupe::cli {

using json = nlohmann::json;

namespace {

/// Reads known keys from one JSON object and remembers which ones it saw, so
/// anything left over can be reported as unknown.
class Section {
public:
  Section(const json& node, std::string where) : node_(node), where_(std::move(where)) {
    if (!node_.is_object()) throw DataError("config: '" + where_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& field) {
    known_.insert(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    try {
      field = it->template get<T>();
    } catch (const json::exception&) {
      throw DataError("config: '" + path(key) + "' has the wrong type");
    }
  }

  template <typename T, typename Parse>
  void read_enum(const char* key, T& field, Parse parse) {
    known_.insert(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    if (!it->is_string()) throw DataError("config: '" + path(key) + "' must be a string");
    try {
      field = parse(it->template get<std::string>());
    } catch (const Error& e) {
      throw DataError("config: '" + path(key) + "': " + e.what());
    }
  }

  const json* child(const char* key) {
    known_.insert(key);
    auto it = node_.find(key);
    return it == node_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : node_.items())
      if (!known_.count(key)) throw DataError("config: unknown field '" + path(key) + "'");
  }

private:
  const json& node_;
  std::string where_;
  std::set<std::string, std::less<>> known_;
};

void read_phantom(const json& node, PhantomSpec& p) {
  Section s(node, "data");
  s.read("train_volumes", p.train_volumes);
  s.read("val_volumes", p.val_volumes);
  s.read("test_volumes", p.test_volumes);
  s.read("slices_per_volume", p.slices_per_volume);
  s.read("height", p.height);
  s.read("width", p.width);
  s.read("min_ellipses", p.min_ellipses);
  s.read("max_ellipses", p.max_ellipses);
  s.read_enum("anisotropy", p.anisotropy, parse_anisotropy);
  s.read("min_aspect", p.min_aspect);
  s.read("max_aspect", p.max_aspect);
  s.read("orientation_spread_deg", p.orientation_spread_deg);
  s.read("min_intensity", p.min_intensity);
  s.read("max_intensity", p.max_intensity);
  s.read("noise_level", p.noise_level);
  s.read("phase_amplitude", p.phase_amplitude);
  s.finish();
}

void read_unet(const json& node, UNetConfig& u) {
  Section s(node, "unet");
  s.read("depth", u.depth);
  s.read("base_channels", u.base_channels);
  s.read("negative_slope", u.negative_slope);
  s.read("residual", u.residual);
  s.read("output_gain", u.output_gain);
  s.read("batch_norm_epsilon", u.batch_norm.epsilon);
  s.read("batch_norm_momentum", u.batch_norm.momentum);
  s.finish();
}

void read_train(const json& node, TrainConfig& t, bool& record_time) {
  Section s(node, "train");
  s.read("alpha", t.alpha);
  s.read("slope_t", t.slope_t);
  s.read("slope_s", t.slope_s);
  s.read("mc_samples", t.mc_samples);
  s.read("learning_rate", t.learning_rate);
  if (const json* v = s.child("mask_learning_rate")) {
    if (v->is_null()) t.mask_learning_rate.reset();
    else if (v->is_number()) t.mask_learning_rate = v->get<double>();
    else throw DataError("config: 'train.mask_learning_rate' must be a number or null");
  }
  s.read("batch_size", t.batch_size);
  s.read("max_epochs", t.max_epochs);
  s.read("patience", t.patience);
  s.read("min_improvement", t.min_improvement);
  s.read_enum("loss", t.loss, parse_loss_kind);
  s.read("line_constrained", t.line_constrained);
  s.read_enum("readout", t.readout, parse_axis);
  s.read("mask_init_noise", t.mask_init_noise);
  s.read("adam_epsilon", t.adam_epsilon);
  s.read("record_time", record_time);
  s.finish();
}

void read_mask(const json& node, MaskSettings& m) {
  Section s(node, "mask");
  s.read("kind", m.kind);
  s.read("power", m.power);
  s.read("center_lines", m.center_lines);
  s.read_enum("phase_encode", m.phase_encode, parse_axis);
  s.read_enum("binarize", m.binarize, parse_binarize_mode);
  s.finish();
}

void read_grid(const json& node, GridSettings& g) {
  Section s(node, "grid");
  s.read("slope_s", g.slope_s);
  s.read("slope_t", g.slope_t);
  s.finish();
}

} // namespace

void RunConfig::propagate() {
  phantom.seed = seed;
  train.seed = seed;
  train.unet.seed = seed;
  train.threads = threads;
}

void apply_json(RunConfig& config, const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("config: invalid JSON: ") + e.what());
  }
  Section s(root, "");
  s.read("seed", config.seed);
  s.read("threads", config.threads);
  std::string out = config.out.string(), data = config.data.string();
  s.read("out", out);
  s.read("data_path", data);
  config.out = out;
  config.data = data;
  if (const json* v = s.child("data")) read_phantom(*v, config.phantom);
  if (const json* v = s.child("train")) read_train(*v, config.train, config.record_time);
  if (const json* v = s.child("unet")) read_unet(*v, config.train.unet);
  if (const json* v = s.child("mask")) read_mask(*v, config.mask);
  if (const json* v = s.child("grid")) read_grid(*v, config.grid);
  s.finish();
}

void apply_json_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  apply_json(config, ss.str());
}

std::string to_json(const RunConfig& c) {
  const auto& p = c.phantom;
  const auto& t = c.train;
  const auto& u = t.unet;
  json root = {
      {"seed", c.seed},
      {"threads", c.threads},
      {"out", c.out.string()},
      {"data_path", c.data.string()},
      {"data",
       {{"train_volumes", p.train_volumes},
        {"val_volumes", p.val_volumes},
        {"test_volumes", p.test_volumes},
        {"slices_per_volume", p.slices_per_volume},
        {"height", p.height},
        {"width", p.width},
        {"min_ellipses", p.min_ellipses},
        {"max_ellipses", p.max_ellipses},
        {"anisotropy", to_string(p.anisotropy)},
        {"min_aspect", p.min_aspect},
        {"max_aspect", p.max_aspect},
        {"orientation_spread_deg", p.orientation_spread_deg},
        {"min_intensity", p.min_intensity},
        {"max_intensity", p.max_intensity},
        {"noise_level", p.noise_level},
        {"phase_amplitude", p.phase_amplitude}}},
      {"train",
       {{"alpha", t.alpha},
        {"slope_t", t.slope_t},
        {"slope_s", t.slope_s},
        {"mc_samples", t.mc_samples},
        {"learning_rate", t.learning_rate},
        {"mask_learning_rate", t.mask_learning_rate ? json(*t.mask_learning_rate) : json(nullptr)},
        {"batch_size", t.batch_size},
        {"max_epochs", t.max_epochs},
        {"patience", t.patience},
        {"min_improvement", t.min_improvement},
        {"loss", to_string(t.loss)},
        {"line_constrained", t.line_constrained},
        {"readout", to_string(t.readout)},
        {"mask_init_noise", t.mask_init_noise},
        {"adam_epsilon", t.adam_epsilon},
        {"record_time", c.record_time}}},
      {"unet",
       {{"depth", u.depth},
        {"base_channels", u.base_channels},
        {"negative_slope", u.negative_slope},
        {"residual", u.residual},
        {"output_gain", u.output_gain},
        {"batch_norm_epsilon", u.batch_norm.epsilon},
        {"batch_norm_momentum", u.batch_norm.momentum}}},
      {"mask",
       {{"kind", c.mask.kind},
        {"power", c.mask.power},
        {"center_lines", c.mask.center_lines},
        {"phase_encode", to_string(c.mask.phase_encode)},
        {"binarize", to_string(c.mask.binarize)}}},
      {"grid", {{"slope_s", c.grid.slope_s}, {"slope_t", c.grid.slope_t}}},
  };
  return root.dump(2) + "\n";
}

std::string to_string(Axis axis) { return axis == Axis::Rows ? "rows" : "columns"; }

Axis parse_axis(const std::string& text) {
  if (text == "rows") return Axis::Rows;
  if (text == "columns") return Axis::Columns;
  throw DomainError("unknown axis '" + text + "' (expected rows or columns)");
}

std::string to_string(BinarizeMode mode) { return mode == BinarizeMode::TopK ? "topk" : "bernoulli"; }

BinarizeMode parse_binarize_mode(const std::string& text) {
  if (text == "topk") return BinarizeMode::TopK;
  if (text == "bernoulli") return BinarizeMode::Bernoulli;
  throw DomainError("unknown binarization '" + text + "' (expected topk or bernoulli)");
}

} // namespace loupe::cli
