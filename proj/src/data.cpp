#include "metadec/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "metadec/image_io.hpp"

namespace fs = std::filesystem;

namespace metadec {

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

void add_gaussian(Tensor<double>& img, double cy, double cx, double sy, double sx, double amp) {
  const int h = img.dim(0), w = img.dim(1);
  for (int y = 0; y < h; ++y) {
    const double ey = (y - cy) * (y - cy) / (2 * sy * sy);
    if (ey > 30) continue;
    for (int x = 0; x < w; ++x) {
      img[static_cast<std::size_t>(y) * w + x] +=
          amp * std::exp(-ey - (x - cx) * (x - cx) / (2 * sx * sx));
    }
  }
}

Tensor<double> sky_background(const SceneSpec& s, std::mt19937_64& rng) {
  Tensor<double> bg({s.height, s.width}, uniform(rng, 0.15, 0.3));
  const int blobs = static_cast<int>(std::lround(s.clutter * uniform(rng, 4, 8)));
  for (int i = 0; i < blobs; ++i) {
    const double sigma = uniform(rng, 8, 20);
    add_gaussian(bg, uniform(rng, 0, s.height), uniform(rng, 0, s.width), sigma,
                 sigma * uniform(rng, 0.7, 1.5), uniform(rng, -0.05, 0.15));
  }
  return bg;
}

Tensor<double> maritime_background(const SceneSpec& s, std::mt19937_64& rng) {
  Tensor<double> bg({s.height, s.width});
  const double top = uniform(rng, 0.35, 0.45), bottom = uniform(rng, 0.1, 0.18);
  for (int y = 0; y < s.height; ++y) {
    const double v = top + (bottom - top) * y / std::max(1, s.height - 1);
    for (int x = 0; x < s.width; ++x) bg[static_cast<std::size_t>(y) * s.width + x] = v;
  }
  const int streaks = static_cast<int>(std::lround(uniform(rng, 3, 7)));
  for (int i = 0; i < streaks; ++i) {
    const double row = uniform(rng, 0, s.height), thick = uniform(rng, 0.6, 1.5);
    const double amp = s.clutter * uniform(rng, 0.03, 0.08);
    const double freq = uniform(rng, 0.05, 0.2), phase = uniform(rng, 0, 6.283185307179586);
    for (int y = 0; y < s.height; ++y) {
      const double ey = std::exp(-(y - row) * (y - row) / (2 * thick * thick));
      if (ey < 1e-6) continue;
      for (int x = 0; x < s.width; ++x) {
        bg[static_cast<std::size_t>(y) * s.width + x] +=
            amp * ey * (0.6 + 0.4 * std::sin(freq * x + phase));
      }
    }
  }
  return bg;
}

Tensor<double> ground_background(const SceneSpec& s, std::mt19937_64& rng) {
  const int h = s.height, w = s.width;
  Tensor<double> grain({h, w});
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : grain.values()) v = nd(rng);
  Tensor<double> bg({h, w}, uniform(rng, 0.22, 0.32));
  const double amp = 0.05 * s.clutter;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      int cnt = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          acc += grain[static_cast<std::size_t>(yy) * w + xx];
          ++cnt;
        }
      }
      bg[static_cast<std::size_t>(y) * w + x] += amp * acc / std::sqrt(double(cnt));
    }
  }
  // Distractors: wider and dimmer than any target.
  const int distractors = static_cast<int>(std::lround(uniform(rng, 2, 4)));
  for (int i = 0; i < distractors; ++i) {
    const double sigma = uniform(rng, 2.8, 4.5);
    add_gaussian(bg, uniform(rng, 0, h), uniform(rng, 0, w), sigma, sigma,
                 uniform(rng, 0.3, 0.6) * s.contrast_min);
  }
  return bg;
}

}  // namespace

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::sky: return "sky";
    case Scenario::maritime: return "maritime";
    case Scenario::ground: return "ground";
  }
  return "?";
}

Scenario parse_scenario(const std::string& s) {
  if (s == "sky") return Scenario::sky;
  if (s == "maritime") return Scenario::maritime;
  if (s == "ground") return Scenario::ground;
  throw std::invalid_argument("unknown scenario '" + s + "' (expected sky, maritime or ground)");
}

void SceneSpec::validate() const {
  auto range = [](double lo, double hi, const char* name) {
    if (!(lo >= 0) || !(hi >= lo)) throw std::invalid_argument(std::string("scene spec: bad ") + name + " range");
  };
  if (height < 8 || width < 8) throw std::invalid_argument("scene spec: image smaller than 8x8");
  if (n_targets < 0) throw std::invalid_argument("scene spec: n_targets < 0");
  range(sigma_min, sigma_max, "sigma");
  range(contrast_min, contrast_max, "contrast");
  if (sigma_min <= 0) throw std::invalid_argument("scene spec: sigma must be positive");
  if (clutter < 0 || noise_std < 0 || min_separation < 0) {
    throw std::invalid_argument("scene spec: negative clutter, noise or separation");
  }
}

SceneSpec default_scene_spec(Scenario scenario, int height, int width) {
  SceneSpec s;
  s.scenario = scenario;
  s.height = height;
  s.width = width;
  switch (scenario) {
    case Scenario::sky:
      s.sigma_min = 1.2, s.sigma_max = 2.0, s.contrast_min = 0.3, s.contrast_max = 0.5;
      break;
    case Scenario::maritime:
      s.sigma_min = 1.5, s.sigma_max = 2.5, s.contrast_min = 0.3, s.contrast_max = 0.45;
      break;
    case Scenario::ground:
      s.sigma_min = 1.2, s.sigma_max = 2.2, s.contrast_min = 0.35, s.contrast_max = 0.5;
      s.noise_std = 0.015;
      break;
  }
  return s;
}

double target_contribution(const Target& t, int y, int x) {
  const double d2 = (y - t.cy) * (y - t.cy) + (x - t.cx) * (x - t.cx);
  return t.contrast * std::exp(-d2 / (2 * t.sigma * t.sigma));
}

SynthScene synth_scene(const SceneSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  const int h = spec.height, w = spec.width;
  Tensor<double> img = spec.scenario == Scenario::sky        ? sky_background(spec, rng)
                       : spec.scenario == Scenario::maritime ? maritime_background(spec, rng)
                                                             : ground_background(spec, rng);
  SynthScene out;
  for (int t = 0; t < spec.n_targets; ++t) {
    Target tg;
    tg.sigma = uniform(rng, spec.sigma_min, spec.sigma_max);
    tg.contrast = uniform(rng, spec.contrast_min, spec.contrast_max);
    const double margin = std::ceil(2 * tg.sigma) + 1;
    if (h - 1 - 2 * margin < 0 || w - 1 - 2 * margin < 0) {
      throw std::runtime_error("synth_scene: image too small for target sigma");
    }
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      tg.cy = uniform(rng, margin, h - 1 - margin);
      tg.cx = uniform(rng, margin, w - 1 - margin);
      placed = std::all_of(out.targets.begin(), out.targets.end(), [&](const Target& o) {
        return std::hypot(o.cy - tg.cy, o.cx - tg.cx) >= spec.min_separation;
      });
    }
    if (!placed) {
      throw std::runtime_error("synth_scene: could not place target " + std::to_string(t + 1) +
                               " of " + std::to_string(spec.n_targets));
    }
    out.targets.push_back(tg);
  }
  BinaryMask mask({h, w});
  for (const auto& tg : out.targets) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double c = target_contribution(tg, y, x);
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        img[i] += c;
        if (c >= 0.5 * tg.contrast) mask[i] = 1;
      }
    }
  }
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  for (auto& v : img.values()) {
    v = std::clamp(v + (spec.noise_std > 0 ? noise(rng) : 0.0), 0.0, 1.0);
    v = std::round(v * 255.0) / 255.0;
  }
  out.sample.image = std::move(img);
  out.sample.mask = std::move(mask);
  out.sample.scenario = to_string(spec.scenario);
  return out;
}

Tensor<std::uint8_t> to_u8(const Tensor<double>& unit_image) {
  Tensor<std::uint8_t> out(unit_image.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(unit_image[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

std::vector<Sample> load_dataset(const std::string& root, const std::string& split) {
  const fs::path base(root);
  const fs::path split_file = base / "splits" / (split + ".txt");
  std::ifstream in(split_file);
  if (!in) throw std::runtime_error("cannot open split file " + split_file.string());
  std::vector<std::string> ids;
  for (std::string line; std::getline(in, line);) {
    line = trim(line);
    if (!line.empty()) ids.push_back(line);
  }
  if (ids.empty()) throw std::runtime_error("split file " + split_file.string() + " is empty");

  std::map<std::string, std::string> labels;
  std::ifstream sc(base / "scenarios.csv");
  for (std::string line; sc && std::getline(sc, line);) {
    line = trim(line);
    const auto comma = line.find(',');
    if (line.empty() || comma == std::string::npos) continue;
    const std::string id = trim(line.substr(0, comma)), label = trim(line.substr(comma + 1));
    if (id == "id" && label == "label") continue;
    labels[id] = label;
  }

  std::vector<Sample> out;
  for (const auto& id : ids) {
    const fs::path img_path = base / "images" / (id + ".png");
    const fs::path mask_path = base / "masks" / (id + ".png");
    if (!fs::exists(img_path)) throw std::runtime_error("missing image for id " + id);
    if (!fs::exists(mask_path)) throw std::runtime_error("missing mask for id " + id);
    const auto raw = read_png_gray(img_path.string());
    const auto raw_mask = read_png_gray(mask_path.string());
    if (raw.shape() != raw_mask.shape()) {
      throw std::runtime_error("image/mask size mismatch for id " + id);
    }
    Sample s;
    s.id = id;
    s.image = Tensor<double>(raw.shape());
    for (std::size_t i = 0; i < raw.size(); ++i) s.image[i] = raw[i] / 255.0;
    s.mask = BinaryMask(raw.shape());
    for (std::size_t i = 0; i < raw.size(); ++i) s.mask[i] = raw_mask[i] >= 128 ? 1 : 0;
    auto it = labels.find(id);
    s.scenario = it == labels.end() ? "unknown" : it->second;
    out.push_back(std::move(s));
  }
  return out;
}

SynthDatasetSpec parse_synth_spec(const std::string& text) {
  SynthDatasetSpec spec;
  std::istringstream in(text);
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("scene spec line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    auto as_int = [&]() {
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != value.size()) throw std::invalid_argument("scene spec: " + key + " is not an integer");
      return v;
    };
    if (key == "scenarios") {
      spec.scenarios.clear();
      std::istringstream parts(value);
      for (std::string p; std::getline(parts, p, ',');) spec.scenarios.push_back(parse_scenario(trim(p)));
    } else if (key == "train") {
      spec.per_scenario_train = as_int();
    } else if (key == "test") {
      spec.per_scenario_test = as_int();
    } else if (key == "height") {
      spec.height = as_int();
    } else if (key == "width") {
      spec.width = as_int();
    } else if (key == "min_targets") {
      spec.min_targets = as_int();
    } else if (key == "max_targets") {
      spec.max_targets = as_int();
    } else {
      throw std::invalid_argument("scene spec: unknown key '" + key + "'");
    }
  }
  if (spec.scenarios.empty()) throw std::invalid_argument("scene spec: no scenarios");
  if (spec.min_targets < 0 || spec.max_targets < spec.min_targets) {
    throw std::invalid_argument("scene spec: bad target count range");
  }
  if (spec.per_scenario_train < 0 || spec.per_scenario_test < 0) {
    throw std::invalid_argument("scene spec: negative sample count");
  }
  return spec;
}

std::vector<Sample> synth_dataset(const SynthDatasetSpec& spec, std::vector<std::string>* train_ids,
                                  std::vector<std::string>* test_ids, int workers) {
  struct Job {
    std::size_t scenario;
    int index;
    bool train;
  };
  std::vector<Job> jobs;
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t s = 0; s < spec.scenarios.size(); ++s) {
      const int begin = pass == 0 ? 0 : spec.per_scenario_train;
      const int end = pass == 0 ? spec.per_scenario_train
                                : spec.per_scenario_train + spec.per_scenario_test;
      for (int i = begin; i < end; ++i) jobs.push_back({s, i, pass == 0});
    }
  }
  std::vector<Sample> out(jobs.size());
  auto run = [&](std::size_t j) {
    const Job& job = jobs[j];
    const Scenario sc = spec.scenarios[job.scenario];
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(sc), static_cast<std::uint32_t>(job.index)};
    std::mt19937_64 rng(seq);
    SceneSpec scene = default_scene_spec(sc, spec.height, spec.width);
    scene.n_targets = std::uniform_int_distribution<int>(spec.min_targets, spec.max_targets)(rng);
    out[j] = synth_scene(scene, rng).sample;
    char id[64];
    std::snprintf(id, sizeof id, "%s_%04d", to_string(sc).c_str(), job.index);
    out[j].id = id;
  };
  workers = std::max(1, workers);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t j = w; j < jobs.size(); j += workers) run(j);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    auto* ids = jobs[j].train ? train_ids : test_ids;
    if (ids) ids->push_back(out[j].id);
  }
  return out;
}

void write_dataset(const std::string& root, const std::vector<Sample>& samples,
                   const std::vector<std::string>& train_ids,
                   const std::vector<std::string>& test_ids) {
  const fs::path base(root);
  fs::create_directories(base / "images");
  fs::create_directories(base / "masks");
  fs::create_directories(base / "splits");
  std::ofstream labels(base / "scenarios.csv");
  labels << "id,label\n";
  for (const auto& s : samples) {
    write_png_gray((base / "images" / (s.id + ".png")).string(), to_u8(s.image));
    Tensor<std::uint8_t> m(s.mask.shape());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = s.mask[i] ? 255 : 0;
    write_png_gray((base / "masks" / (s.id + ".png")).string(), m);
    labels << s.id << "," << s.scenario << "\n";
  }
  auto write_split = [&](const std::string& name, const std::vector<std::string>& ids) {
    std::ofstream f(base / "splits" / (name + ".txt"));
    for (const auto& id : ids) f << id << "\n";
    if (!f) throw std::runtime_error("cannot write split file " + name);
  };
  write_split("train", train_ids);
  write_split("test", test_ids);
}

}  // namespace metadec
