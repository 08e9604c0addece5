// SPDX-License-Identifier: Apache-2.0
/**
 * @file   graph.cpp
 * @brief  Model loader, realizers and shape inference
 */
#include <nnplan/graph.hpp>

#include <nnplan/error.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace nnplan {

namespace {

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos)
    return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return out;
}

template <typename T> std::optional<T> to_number(std::string_view s) {
  T value{};
  s = trim(s);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    return std::nullopt;
  return value;
}

std::optional<double> to_double(std::string_view s) {
  // from_chars for floating point is not reliable on every libstdc++ we
  // target, strtod on a copy is
  std::string copy(trim(s));
  if (copy.empty())
    return std::nullopt;
  char *end = nullptr;
  double v = std::strtod(copy.c_str(), &end);
  if (end != copy.c_str() + copy.size())
    return std::nullopt;
  return v;
}

std::optional<bool> to_bool(std::string_view s) {
  auto v = lower(trim(s));
  if (v == "true" || v == "1" || v == "yes")
    return true;
  if (v == "false" || v == "0" || v == "no")
    return false;
  return std::nullopt;
}

std::optional<LayerKind> kind_from_type(std::string_view type) {
  static const std::map<std::string, LayerKind, std::less<>> kinds = {
    {"input", LayerKind::input},     {"linear", LayerKind::linear},
    {"conv2d", LayerKind::conv2d},   {"sigmoid", LayerKind::sigmoid},
    {"relu", LayerKind::relu},       {"flatten", LayerKind::flatten},
    {"reshape", LayerKind::reshape}, {"mse", LayerKind::mse_loss},
  };
  auto it = kinds.find(lower(type));
  if (it == kinds.end())
    return std::nullopt;
  return it->second;
}

struct KeySpec {
  std::set<std::string, std::less<>> allowed;
  std::set<std::string, std::less<>> required;
};

const KeySpec &keys_for(LayerKind kind) {
  static const std::map<LayerKind, KeySpec> specs = {
    {LayerKind::input, {{"shape"}, {"shape"}}},
    {LayerKind::linear,
     {{"units", "trainable", "activation", "flatten"}, {"units"}}},
    {LayerKind::conv2d,
     {{"filters", "kernel", "stride", "padding", "trainable", "activation",
       "flatten"},
      {"filters", "kernel"}}},
    {LayerKind::sigmoid, {}},
    {LayerKind::relu, {}},
    {LayerKind::flatten, {}},
    {LayerKind::reshape, {{"shape"}, {"shape"}}},
    {LayerKind::mse_loss, {}},
  };
  return specs.at(kind);
}

const std::set<std::string, std::less<>> model_keys = {
  "batch",     "epochs", "learning_rate", "loss",         "optimizer",
  "clip_grad_norm", "swap", "lookahead", "seed", "dataset_size",
  "input_shape"};

void apply_model_key(Hyper &h, const std::string &key, std::string_view value,
                     std::size_t line) {
  auto bad = [&](const char *expect) {
    return ParseError(line, "[model] " + key + ": expected " + expect +
                              ", got '" + std::string(value) + "'");
  };
  if (key == "batch") {
    auto v = to_number<std::uint32_t>(value);
    if (!v || *v == 0)
      throw bad("positive integer");
    h.batch_size = *v;
  } else if (key == "epochs") {
    auto v = to_number<std::uint32_t>(value);
    if (!v || *v == 0)
      throw bad("positive integer");
    h.epochs = *v;
  } else if (key == "learning_rate") {
    auto v = to_double(value);
    if (!v || *v < 0)
      throw bad("non-negative number");
    h.learning_rate = *v;
  } else if (key == "loss") {
    auto v = lower(value);
    if (v != "mse")
      throw bad("mse");
    h.loss = v;
  } else if (key == "optimizer") {
    auto v = lower(value);
    if (v != "sgd")
      throw bad("sgd");
    h.optimizer = v;
  } else if (key == "clip_grad_norm") {
    auto v = to_double(value);
    if (!v || *v <= 0)
      throw bad("positive number");
    h.clip_grad_norm = *v;
  } else if (key == "swap") {
    try {
      h.swap = parse_swap_kind(value);
    } catch (const std::invalid_argument &) {
      throw bad("off|ondemand|reduced|proactive");
    }
  } else if (key == "lookahead") {
    auto v = to_number<int>(value);
    if (!v || *v < 1)
      throw bad("integer >= 1");
    h.lookahead = *v;
  } else if (key == "seed") {
    auto v = to_number<std::uint64_t>(value);
    if (!v)
      throw bad("unsigned integer");
    h.seed = *v;
  } else if (key == "dataset_size") {
    auto v = to_number<std::uint32_t>(value);
    if (!v)
      throw bad("unsigned integer");
    h.dataset_size = *v;
  } else if (key == "input_shape") {
    h.input_shape = std::string(trim(value));
  }
}

} // namespace

std::string Dim4::str() const {
  std::ostringstream os;
  os << batch << ':' << channel << ':' << height << ':' << width;
  return os.str();
}

Dim4 parse_dim(std::string_view text) {
  std::vector<std::uint32_t> parts;
  std::string_view rest = trim(text);
  while (true) {
    auto pos = rest.find(':');
    auto tok = rest.substr(0, pos);
    auto v = to_number<std::uint32_t>(tok);
    if (!v || *v == 0)
      throw GraphError("invalid dimension '" + std::string(text) + "'");
    parts.push_back(*v);
    if (pos == std::string_view::npos)
      break;
    rest = rest.substr(pos + 1);
  }
  if (parts.size() == 3)
    return Dim4{1, parts[0], parts[1], parts[2]};
  if (parts.size() == 4)
    return Dim4{parts[0], parts[1], parts[2], parts[3]};
  throw GraphError("dimension '" + std::string(text) +
                   "' must be C:H:W or B:C:H:W");
}

std::string_view to_string(LayerKind kind) {
  switch (kind) {
  case LayerKind::input:
    return "input";
  case LayerKind::linear:
    return "linear";
  case LayerKind::conv2d:
    return "conv2d";
  case LayerKind::sigmoid:
    return "sigmoid";
  case LayerKind::relu:
    return "relu";
  case LayerKind::flatten:
    return "flatten";
  case LayerKind::reshape:
    return "reshape";
  case LayerKind::mse_loss:
    return "mse";
  }
  return "?";
}

std::string_view to_string(SwapKind kind) {
  switch (kind) {
  case SwapKind::off:
    return "off";
  case SwapKind::on_demand:
    return "ondemand";
  case SwapKind::reduced:
    return "reduced";
  case SwapKind::proactive:
    return "proactive";
  }
  return "?";
}

SwapKind parse_swap_kind(std::string_view text) {
  auto v = lower(trim(text));
  if (v == "off")
    return SwapKind::off;
  if (v == "ondemand" || v == "on_demand")
    return SwapKind::on_demand;
  if (v == "reduced")
    return SwapKind::reduced;
  if (v == "proactive")
    return SwapKind::proactive;
  throw std::invalid_argument("unknown swap mode '" + std::string(text) + "'");
}

const std::string *LayerNode::property(const std::string &key) const {
  auto it = properties.find(key);
  return it == properties.end() ? nullptr : &it->second;
}

LayerNode make_node(std::string id, LayerKind kind,
                    std::map<std::string, std::string> properties) {
  LayerNode node;
  node.id = std::move(id);
  node.kind = kind;
  node.properties = std::move(properties);
  switch (kind) {
  case LayerKind::sigmoid:
  case LayerKind::relu:
    node.inplace_class = InplaceClass::modify_view;
    break;
  case LayerKind::flatten:
  case LayerKind::reshape:
    node.inplace_class = InplaceClass::read_only_view;
    break;
  default:
    node.inplace_class = InplaceClass::none;
  }
  if (node.has_weights()) {
    node.trainable = true;
    if (auto *t = node.property("trainable")) {
      auto b = to_bool(*t);
      if (!b)
        throw GraphError("layer '" + node.id + "': trainable must be a bool");
      node.trainable = *b;
    }
  }
  return node;
}

std::size_t ModelGraph::compute_layer_count() const noexcept {
  if (!layers.empty() && layers.front().kind == LayerKind::input)
    return layers.size() - 1;
  return layers.size();
}

ModelGraph parse_model(std::string_view text) {
  ModelGraph graph;
  struct Section {
    std::string name;
    std::size_t line;
    std::vector<std::pair<std::string, std::string>> entries;
    std::vector<std::size_t> entry_lines;
  };
  std::vector<Section> sections;
  std::set<std::string> names;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    auto raw = text.substr(pos, nl == std::string_view::npos ? text.npos
                                                             : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;

    auto line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';')
      continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ParseError(line_no, "unterminated section header");
      auto name = std::string(trim(line.substr(1, line.size() - 2)));
      if (name.empty())
        throw ParseError(line_no, "empty section name");
      if (!names.insert(lower(name)).second)
        throw ParseError(line_no, "duplicate section [" + name + "]");
      sections.push_back({name, line_no, {}, {}});
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ParseError(line_no, "expected key=value");
    if (sections.empty())
      throw ParseError(line_no, "key outside of any section");
    auto key = lower(trim(line.substr(0, eq)));
    auto value = std::string(trim(line.substr(eq + 1)));
    if (key.empty())
      throw ParseError(line_no, "empty key");
    auto &sec = sections.back();
    for (auto &[k, v] : sec.entries)
      if (k == key)
        throw ParseError(line_no, "duplicate key '" + key + "'");
    sec.entries.emplace_back(key, value);
    sec.entry_lines.push_back(line_no);
  }

  if (sections.empty())
    throw ParseError(line_no, "no sections found");

  for (auto &sec : sections) {
    if (lower(sec.name) == "model") {
      for (std::size_t i = 0; i < sec.entries.size(); ++i) {
        auto &[key, value] = sec.entries[i];
        if (!model_keys.count(key))
          throw ParseError(sec.entry_lines[i], "unknown [model] key '" + key +
                                                 "'");
        apply_model_key(graph.hyper, key, value, sec.entry_lines[i]);
      }
      continue;
    }

    std::optional<LayerKind> kind;
    std::map<std::string, std::string> props;
    for (std::size_t i = 0; i < sec.entries.size(); ++i) {
      auto &[key, value] = sec.entries[i];
      if (key == "type") {
        kind = kind_from_type(value);
        if (!kind)
          throw ParseError(sec.entry_lines[i],
                           "unknown layer kind '" + value + "'");
      } else {
        props[key] = value;
      }
    }
    if (!kind)
      throw ParseError(sec.line, "[" + sec.name + "] has no type");
    const auto &spec = keys_for(*kind);
    for (std::size_t i = 0; i < sec.entries.size(); ++i) {
      auto &key = sec.entries[i].first;
      if (key != "type" && !spec.allowed.count(key))
        throw ParseError(sec.entry_lines[i],
                         "unknown key '" + key + "' for " +
                           std::string(to_string(*kind)) + " layer");
    }
    for (auto &req : spec.required)
      if (!props.count(req))
        throw ParseError(sec.line, "[" + sec.name + "] " +
                                     std::string(to_string(*kind)) +
                                     " requires '" + req + "'");
    try {
      graph.layers.push_back(make_node(sec.name, *kind, std::move(props)));
    } catch (const GraphError &e) {
      throw ParseError(sec.line, e.what());
    }
  }
  return graph;
}

ModelGraph load_model(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ParseError(0, "cannot open model file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_model(ss.str());
}

ModelGraph realize(ModelGraph graph, RealizeOptions options) {
  auto &layers = graph.layers;

  // Input realizer
  auto n_inputs = std::count_if(layers.begin(), layers.end(), [](auto &l) {
    return l.kind == LayerKind::input;
  });
  if (n_inputs > 1)
    throw GraphError("model has more than one input layer");
  if (n_inputs == 0) {
    if (!graph.hyper.input_shape)
      throw GraphError("model has no input layer and no [model] input_shape");
    layers.insert(layers.begin(),
                  make_node("input", LayerKind::input,
                            {{"shape", *graph.hyper.input_shape}}));
  } else if (layers.front().kind != LayerKind::input) {
    throw GraphError("input layer must come first");
  }

  // Activation realizer
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto *act = layers[i].property("activation");
    if (!act)
      continue;
    auto value = lower(*act);
    auto id = layers[i].id;
    layers[i].properties.erase("activation");
    if (value == "none")
      continue;
    LayerKind kind;
    if (value == "sigmoid")
      kind = LayerKind::sigmoid;
    else if (value == "relu")
      kind = LayerKind::relu;
    else
      throw GraphError("layer '" + id + "': unsupported activation '" + value +
                       "'");
    layers.insert(layers.begin() + i + 1, make_node(id + "/activation", kind));
  }

  // Flatten realizer
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto *fl = layers[i].property("flatten");
    if (!fl)
      continue;
    auto on = to_bool(*fl);
    auto id = layers[i].id;
    if (!on)
      throw GraphError("layer '" + id + "': flatten must be a bool");
    layers[i].properties.erase("flatten");
    if (!*on)
      continue;
    // the flatten goes after the realized activation, if any
    std::size_t at = i + 1;
    if (at < layers.size() && layers[at].id == id + "/activation")
      ++at;
    layers.insert(layers.begin() + at, make_node(id + "/flatten",
                                                  LayerKind::flatten));
  }

  // Loss realizer
  auto n_loss = std::count_if(layers.begin(), layers.end(),
                              [](auto &l) { return l.is_loss(); });
  if (n_loss > 1)
    throw GraphError("model has more than one loss layer");
  if (n_loss == 1 && !layers.back().is_loss())
    throw GraphError("loss layer must be the last layer");
  if (n_loss == 0) {
    if (graph.hyper.loss)
      layers.push_back(make_node("loss", LayerKind::mse_loss));
    else if (options.require_loss)
      throw GraphError("model has no loss layer and no [model] loss");
  }
  if (layers.size() < 2)
    throw GraphError("model needs at least one layer after the input");

  std::set<std::string> ids;
  for (auto &l : layers)
    if (!ids.insert(l.id).second)
      throw GraphError("duplicate layer id '" + l.id + "'");

  infer_shapes(graph);
  return graph;
}

std::uint32_t linear_units(const LayerNode &node) {
  auto *u = node.property("units");
  auto v = u ? to_number<std::uint32_t>(*u) : std::nullopt;
  if (!v || *v == 0)
    throw GraphError("layer '" + node.id + "': units must be positive");
  return *v;
}

ConvParams conv_params(const LayerNode &node) {
  ConvParams p;
  auto *f = node.property("filters");
  auto filters = f ? to_number<std::uint32_t>(*f) : std::nullopt;
  if (!filters || *filters == 0)
    throw GraphError("layer '" + node.id + "': filters must be positive");
  p.filters = *filters;

  auto *k = node.property("kernel");
  if (!k)
    throw GraphError("layer '" + node.id + "': kernel is required");
  std::string_view ks = trim(*k);
  auto x = ks.find_first_of("xX");
  auto kh = to_number<std::uint32_t>(ks.substr(0, x));
  auto kw = x == std::string_view::npos ? kh
                                        : to_number<std::uint32_t>(ks.substr(
                                            x + 1));
  if (!kh || !kw || *kh == 0)
    throw GraphError("layer '" + node.id + "': bad kernel '" + *k + "'");
  if (*kh != *kw)
    throw GraphError("layer '" + node.id + "': only square kernels");
  p.kernel = *kh;

  if (auto *s = node.property("stride")) {
    auto v = to_number<std::uint32_t>(*s);
    if (!v || *v == 0)
      throw GraphError("layer '" + node.id + "': stride must be positive");
    p.stride = *v;
  }
  if (auto *pad = node.property("padding"); pad && lower(*pad) != "same")
    throw GraphError("layer '" + node.id + "': unsupported padding '" + *pad +
                     "', only same");
  return p;
}

Dim4 weight_dim(const LayerNode &node, const Dim4 &input) {
  switch (node.kind) {
  case LayerKind::linear:
    return Dim4{1, 1, input.width + 1, linear_units(node)};
  case LayerKind::conv2d: {
    auto p = conv_params(node);
    return Dim4{1, 1, p.filters,
                input.channel * p.kernel * p.kernel + 1};
  }
  default:
    throw GraphError("layer '" + node.id + "' has no weights");
  }
}

ShapeMap infer_shapes(const ModelGraph &graph) {
  ShapeMap shapes;
  if (graph.layers.empty() || graph.layers.front().kind != LayerKind::input)
    throw GraphError("shape inference needs a leading input layer");

  const auto batch = graph.hyper.batch_size;
  Dim4 cur;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto &node = graph.layers[i];
    auto fail = [&](const std::string &why) {
      return GraphError("shape mismatch at layer '" + node.id + "' (input " +
                        cur.str() + "): " + why);
    };
    Dim4 in = cur, out;
    switch (node.kind) {
    case LayerKind::input: {
      if (i != 0)
        throw GraphError("input layer must come first");
      auto d = parse_dim(*node.property("shape"));
      d.batch = batch;
      in = out = d;
      break;
    }
    case LayerKind::linear:
      if (in.channel != 1 || in.height != 1)
        throw fail("linear expects a flat B:1:1:N input");
      out = Dim4{batch, 1, 1, linear_units(node)};
      break;
    case LayerKind::conv2d: {
      auto p = conv_params(node);
      out = Dim4{batch, p.filters, (in.height + p.stride - 1) / p.stride,
                 (in.width + p.stride - 1) / p.stride};
      break;
    }
    case LayerKind::sigmoid:
    case LayerKind::relu:
      out = in;
      break;
    case LayerKind::flatten:
      out = Dim4{batch, 1, 1, static_cast<std::uint32_t>(in.feature_count())};
      break;
    case LayerKind::reshape: {
      auto d = parse_dim(*node.property("shape"));
      d.batch = batch;
      if (d.count() != in.count())
        throw fail("reshape to " + d.str() + " changes the element count");
      out = d;
      break;
    }
    case LayerKind::mse_loss:
      if (i + 1 != graph.layers.size())
        throw GraphError("loss layer '" + node.id + "' must be last");
      out = in;
      break;
    }
    if (i == 0 && node.kind != LayerKind::input)
      throw GraphError("first layer must be the input");
    shapes[node.id] = {in, out};
    cur = out;
  }
  return shapes;
}

} // namespace nnplan
