#include "probanet/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <set>
#include <sstream>
#include <type_traits>

#include "probanet/error.hpp"

namespace probanet {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <class T>
bool parse_number(std::string_view text, T& out) {
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, out);
    return ec == std::errc{} && ptr == end;
}

bool parse_value(std::string_view text, int& out) { return parse_number(text, out); }
bool parse_value(std::string_view text, std::uint64_t& out) { return parse_number(text, out); }
bool parse_value(std::string_view text, double& out) { return parse_number(text, out); }

bool parse_value(std::string_view text, bool& out) {
    if (text == "true" || text == "1") {
        out = true;
        return true;
    }
    if (text == "false" || text == "0") {
        out = false;
        return true;
    }
    return false;
}

bool parse_value(std::string_view text, VarianceTarget& out) {
    if (text == "gate") out = VarianceTarget::gate;
    else if (text == "input") out = VarianceTarget::input;
    else return false;
    return true;
}

bool parse_value(std::string_view text, VarianceScope& out) {
    if (text == "global") out = VarianceScope::global;
    else if (text == "per_anchor") out = VarianceScope::per_anchor;
    else return false;
    return true;
}

template <class T>
std::string format_value(const T& v) {
    if constexpr (std::is_same_v<T, bool>) {
        return v ? "true" : "false";
    } else if constexpr (std::is_enum_v<T>) {
        return to_string(v);
    } else {
        char buf[64];
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
        return std::string(buf, ptr);
    }
}

struct Binding {
    ConfigKey key;
    std::function<bool(ExperimentConfig&, std::string_view)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

template <class Access>
Binding bind(std::string name, std::string description, Access access) {
    return {{std::move(name), std::move(description)},
            [access](ExperimentConfig& c, std::string_view text) { return parse_value(text, access(c)); },
            [access](const ExperimentConfig& c) { return format_value(access(const_cast<ExperimentConfig&>(c))); }};
}

const std::vector<Binding>& bindings() {
    static const std::vector<Binding> table = [] {
        std::vector<Binding> t;
        // Scene simulator.
        t.push_back(bind("height", "feature map height (cells)", [](ExperimentConfig& c) -> auto& { return c.sim.height; }));
        t.push_back(bind("width", "feature map width (cells)", [](ExperimentConfig& c) -> auto& { return c.sim.width; }));
        t.push_back(bind("channels", "feature channels C", [](ExperimentConfig& c) -> auto& { return c.sim.channels; }));
        t.push_back(bind("anchor_count", "anchors per cell C'", [](ExperimentConfig& c) -> auto& { return c.sim.anchor_count; }));
        t.push_back(bind("anchor_min_size", "smallest square anchor side", [](ExperimentConfig& c) -> auto& { return c.sim.anchor_min_size; }));
        t.push_back(bind("anchor_max_size", "largest square anchor side", [](ExperimentConfig& c) -> auto& { return c.sim.anchor_max_size; }));
        t.push_back(bind("min_objects", "fewest objects per scene", [](ExperimentConfig& c) -> auto& { return c.sim.min_objects; }));
        t.push_back(bind("max_objects", "most objects per scene", [](ExperimentConfig& c) -> auto& { return c.sim.max_objects; }));
        t.push_back(bind("min_object_size", "smallest object side", [](ExperimentConfig& c) -> auto& { return c.sim.min_object_size; }));
        t.push_back(bind("max_object_size", "largest object side", [](ExperimentConfig& c) -> auto& { return c.sim.max_object_size; }));
        t.push_back(bind("feature_gain", "object bump amplitude", [](ExperimentConfig& c) -> auto& { return c.sim.feature_gain; }));
        t.push_back(bind("noise_level", "uniform noise amplitude", [](ExperimentConfig& c) -> auto& { return c.sim.noise_level; }));
        t.push_back(bind("bump_width_min", "narrowest bump, relative to object half-extent", [](ExperimentConfig& c) -> auto& { return c.sim.bump_width_min; }));
        t.push_back(bind("bump_width_max", "widest bump, relative to object half-extent", [](ExperimentConfig& c) -> auto& { return c.sim.bump_width_max; }));
        t.push_back(bind("fg_iou", "foreground IoU threshold", [](ExperimentConfig& c) -> auto& { return c.sim.thresholds.fg_iou; }));
        t.push_back(bind("bg_iou", "background IoU threshold", [](ExperimentConfig& c) -> auto& { return c.sim.thresholds.bg_iou; }));
        t.push_back(bind("hard_bg_min_iou", "lower edge of the hard background band", [](ExperimentConfig& c) -> auto& { return c.sim.thresholds.hard_bg_min_iou; }));
        t.push_back(bind("hard_fg_max_iou", "upper edge of the hard foreground band", [](ExperimentConfig& c) -> auto& { return c.sim.thresholds.hard_fg_max_iou; }));
        // Optimisation.
        t.push_back(bind("learning_rate", "SGD learning rate", [](ExperimentConfig& c) -> auto& { return c.train.learning_rate; }));
        t.push_back(bind("momentum", "SGD momentum", [](ExperimentConfig& c) -> auto& { return c.train.momentum; }));
        t.push_back(bind("weight_decay", "L2 weight decay coefficient", [](ExperimentConfig& c) -> auto& { return c.train.weight_decay; }));
        t.push_back(bind("epochs", "number of epochs", [](ExperimentConfig& c) -> auto& { return c.train.epochs; }));
        t.push_back(bind("steps_per_epoch", "steps per epoch", [](ExperimentConfig& c) -> auto& { return c.train.steps_per_epoch; }));
        t.push_back(bind("lr_decay_every", "epochs between learning-rate decays, 0 = off", [](ExperimentConfig& c) -> auto& { return c.train.lr_decay_every; }));
        t.push_back(bind("lr_decay_factor", "learning-rate multiplier per decay", [](ExperimentConfig& c) -> auto& { return c.train.lr_decay_factor; }));
        t.push_back(bind("grad_clip", "global gradient L2 norm cap, 0 = off", [](ExperimentConfig& c) -> auto& { return c.train.grad_clip; }));
        // Gate.
        t.push_back(bind("alpha", "variance loss weight", [](ExperimentConfig& c) -> auto& { return c.train.alpha; }));
        t.push_back(bind("epsilon", "variance floor", [](ExperimentConfig& c) -> auto& { return c.train.epsilon; }));
        t.push_back(bind("th", "training truncation threshold", [](ExperimentConfig& c) -> auto& { return c.train.th; }));
        t.push_back(bind("r", "gate reduction ratio", [](ExperimentConfig& c) -> auto& { return c.train.r; }));
        t.push_back(bind("proposal_relu", "ReLU on the proposal map (true|false)", [](ExperimentConfig& c) -> auto& { return c.train.proposal_relu; }));
        t.push_back(bind("variance_target", "gate | input", [](ExperimentConfig& c) -> auto& { return c.train.variance_target; }));
        t.push_back(bind("variance_scope", "global | per_anchor", [](ExperimentConfig& c) -> auto& { return c.train.variance_scope; }));
        t.push_back(bind("probanet_enabled", "true | false", [](ExperimentConfig& c) -> auto& { return c.train.probanet_enabled; }));
        // Batching, initialisation, evaluation.
        t.push_back(bind("scenes_per_batch", "scenes stacked into one step", [](ExperimentConfig& c) -> auto& { return c.train.scenes_per_batch; }));
        t.push_back(bind("batch_size", "anchors per mini-batch", [](ExperimentConfig& c) -> auto& { return c.train.batch_size; }));
        t.push_back(bind("fg_per_batch", "foreground capacity per mini-batch", [](ExperimentConfig& c) -> auto& { return c.train.fg_per_batch; }));
        t.push_back(bind("eval_scenes", "held-out scenes for the final evaluation", [](ExperimentConfig& c) -> auto& { return c.train.eval_scenes; }));
        t.push_back(bind("proposal_bias_init", "initial proposal-conv bias", [](ExperimentConfig& c) -> auto& { return c.train.proposal_bias_init; }));
        t.push_back(bind("gate_bias_init", "initial expand-conv bias", [](ExperimentConfig& c) -> auto& { return c.train.gate_bias_init; }));
        t.push_back(bind("gate_expand_init_scale", "multiplier on the initial expand-conv weights", [](ExperimentConfig& c) -> auto& { return c.train.gate_expand_init_scale; }));
        t.push_back(bind("gate_expand_init_mean", "offset added to the initial expand-conv weights", [](ExperimentConfig& c) -> auto& { return c.train.gate_expand_init_mean; }));
        t.push_back(bind("head_shift_init", "initial head shift", [](ExperimentConfig& c) -> auto& { return c.train.head_shift_init; }));
        t.push_back(bind("seed", "first seed", [](ExperimentConfig& c) -> auto& { return c.train.seed; }));
        return t;
    }();
    return table;
}

}  // namespace

void ExperimentConfig::validate() const {
    sim.validate();
    train.validate();
    if (sim.channels % train.r != 0)
        throw ConfigError("channels (" + std::to_string(sim.channels) + ") not divisible by r (" +
                          std::to_string(train.r) + ")");
}

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        for (const auto& b : bindings()) k.push_back(b.key);
        return k;
    }();
    return keys;
}

ExperimentConfig parse_config(std::istream& in) {
    ExperimentConfig config;
    std::set<std::string, std::less<>> seen;
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line(raw);
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;

        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError("expected key = value", line_no);
        const std::string_view key = trim(line.substr(0, eq));
        const std::string_view value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("missing key", line_no);

        const auto& table = bindings();
        auto it = std::find_if(table.begin(), table.end(), [&](const Binding& b) { return b.key.name == key; });
        if (it == table.end()) throw ConfigError("unknown key '" + std::string(key) + "'", line_no);
        if (!seen.insert(std::string(key)).second)
            throw ConfigError("key '" + std::string(key) + "' given twice", line_no);
        if (value.empty() || !it->set(config, value))
            throw ConfigError("bad value '" + std::string(value) + "' for '" + std::string(key) + "'", line_no);
    }
    config.validate();
    return config;
}

ExperimentConfig parse_config(std::string_view text) {
    std::istringstream in{std::string(text)};
    return parse_config(in);
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    return parse_config(in);
}

std::string format_config(const ExperimentConfig& config) {
    std::string out;
    for (const auto& b : bindings()) out += b.key.name + " = " + b.get(config) + '\n';
    return out;
}

std::string to_string(VarianceTarget target) { return target == VarianceTarget::gate ? "gate" : "input"; }

std::string to_string(VarianceScope scope) { return scope == VarianceScope::global ? "global" : "per_anchor"; }

}  // namespace probanet
