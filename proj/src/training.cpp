#include "metadec/training.hpp"

#include "metadec/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace fs = std::filesystem;

namespace metadec {

namespace {

constexpr double kClip = 1e-7;
constexpr char kMagic[8] = {'M', 'D', 'C', 'K', 'P', 'T', '0', '1'};

void require_same(const Tensor<double>& a, const Tensor<double>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
  }
}

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), 0x747261u};
  return std::mt19937_64(seq);
}

// Binary writer / reader helpers.
struct Writer {
  std::ofstream out;
  template <typename V>
  void pod(const V& v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void str(const std::string& s) {
    pod(static_cast<std::uint64_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const Tensor<float>& t) {
    pod(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) pod(static_cast<std::int32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
};

struct Reader {
  std::ifstream in;
  std::string path;
  template <typename V>
  V pod() {
    V v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw std::runtime_error(path + ": truncated checkpoint");
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > (1u << 26)) throw std::runtime_error(path + ": corrupt checkpoint string");
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) throw std::runtime_error(path + ": truncated checkpoint");
    return s;
  }
  Tensor<float> tensor() {
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) throw std::runtime_error(path + ": corrupt checkpoint tensor");
    Shape shape(rank);
    for (auto& d : shape) d = pod<std::int32_t>();
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw std::runtime_error(path + ": truncated checkpoint");
    return t;
  }
};

struct Header {
  std::uint64_t hash = 0;
  std::string config_text;
};

Header read_header(Reader& r) {
  char magic[8];
  r.in.read(magic, 8);
  if (!r.in || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error(r.path + ": not a checkpoint file");
  }
  Header h;
  h.hash = r.pod<std::uint64_t>();
  h.config_text = r.str();
  return h;
}

Tensor<float> target_tensor(const std::vector<const BinaryMask*>& masks) {
  const int h = masks[0]->dim(0), w = masks[0]->dim(1);
  Tensor<float> t({static_cast<int>(masks.size()), 1, h, w});
  for (std::size_t b = 0; b < masks.size(); ++b) {
    for (std::size_t i = 0; i < masks[b]->size(); ++i) {
      t[b * masks[b]->size() + i] = (*masks[b])[i] ? 1.0f : 0.0f;
    }
  }
  return t;
}

template <typename F>
void parallel_for(std::size_t n, int workers, F&& fn) {
  workers = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errs(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errs[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errs) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

double dice_loss(const Tensor<double>& m, const Tensor<double>& gt, double eps) {
  require_same(m, gt, "dice_loss");
  double inter = 0, sm = 0, sg = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    inter += m[i] * gt[i];
    sm += m[i];
    sg += gt[i];
  }
  return 1.0 - (2.0 * inter + eps) / (sm + sg + eps);
}

double bce_loss(const Tensor<double>& m, const Tensor<double>& gt) {
  require_same(m, gt, "bce_loss");
  double acc = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double p = std::clamp(m[i], kClip, 1.0 - kClip);
    acc -= gt[i] * std::log(p) + (1.0 - gt[i]) * std::log1p(-p);
  }
  return acc / static_cast<double>(m.size());
}

double total_loss(const Tensor<double>& m, const Tensor<double>& gt, double lambda) {
  const double bce = bce_loss(m, gt);
  if (lambda == 0) return bce;
  Tensor<double> clipped(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) clipped[i] = std::clamp(m[i], kClip, 1.0 - kClip);
  return bce + lambda * dice_loss(clipped, gt);
}

double lr_at_step(int step, int total_steps, double lr_init) {
  if (total_steps <= 0 || step < 0 || step > total_steps) {
    throw std::out_of_range("lr_at_step: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
  }
  if (step == total_steps) return 0.0;
  return lr_init * (1.0 + std::cos(M_PI * step / total_steps)) / 2.0;
}

std::pair<Tensor<double>, BinaryMask> augment(const Tensor<double>& image, const BinaryMask& mask,
                                              std::mt19937_64& rng, const AugmentOptions& opt) {
  if (image.shape() != mask.shape() || image.rank() != 2) {
    throw std::invalid_argument("augment: image and mask sizes differ");
  }
  const int h = image.dim(0), w = image.dim(1);
  const int ch = opt.crop_height > 0 ? opt.crop_height : h;
  const int cw = opt.crop_width > 0 ? opt.crop_width : w;
  if (h < ch || w < cw) {
    throw std::invalid_argument("augment: image " + shape_string(image.shape()) +
                                " smaller than crop " + std::to_string(ch) + "x" + std::to_string(cw));
  }
  const int y0 = std::uniform_int_distribution<int>(0, h - ch)(rng);
  const int x0 = std::uniform_int_distribution<int>(0, w - cw)(rng);
  std::bernoulli_distribution coin(0.5);
  const bool hf = coin(rng), vf = coin(rng);
  const bool hflip = opt.force_hflip.value_or(hf);
  const bool vflip = opt.force_vflip.value_or(vf);
  Tensor<double> img({ch, cw});
  BinaryMask m({ch, cw});
  for (int y = 0; y < ch; ++y) {
    const int sy = y0 + (vflip ? ch - 1 - y : y);
    for (int x = 0; x < cw; ++x) {
      const int sx = x0 + (hflip ? cw - 1 - x : x);
      img[static_cast<std::size_t>(y) * cw + x] = image[static_cast<std::size_t>(sy) * w + sx];
      m[static_cast<std::size_t>(y) * cw + x] = mask[static_cast<std::size_t>(sy) * w + sx];
    }
  }
  return {std::move(img), std::move(m)};
}

template <typename T>
Adam<T>::Adam(const ParameterStore<T>& store) {
  for (const auto& [name, p] : store.parameters()) {
    params_.push_back(p);
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++t_;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].node()->has_grad()) continue;
    const Tensor<T>& g = params_[i].grad();
    Tensor<T>& p = params_[i].mutable_value();
    T* m = m_[i].data();
    T* v = v_[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = static_cast<T>(b1 * m[k] + (1 - b1) * g[k]);
      v[k] = static_cast<T>(b2 * v[k] + (1 - b2) * double(g[k]) * g[k]);
      const double update = lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
      p[k] = static_cast<T>(p[k] - update);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

double train_step(Model<float>& model, Adam<float>& adam, const std::vector<const Sample*>& batch,
                  double lr) {
  std::vector<const Tensor<double>*> images;
  std::vector<const BinaryMask*> masks;
  for (const auto* s : batch) {
    images.push_back(&s->image);
    masks.push_back(&s->mask);
  }
  model.store().zero_grad();
  auto out = model.forward(prepare_batch<float>(images, model.config().sigma_hp), true);
  auto loss = ops::segmentation_loss<float>(out.logits, target_tensor(masks),
                                            static_cast<float>(model.config().lambda_dice));
  const double value = loss.value()[0];
  if (!std::isfinite(value)) return value;
  backward(loss);
  adam.step(lr);
  return value;
}

void save_checkpoint(const std::string& path, const Model<float>& model, const Adam<float>* adam,
                     const TrainState& state) {
  const std::string tmp = path + ".tmp";
  {
    Writer w{std::ofstream(tmp, std::ios::binary)};
    if (!w.out) throw std::runtime_error("cannot write checkpoint " + path);
    w.out.write(kMagic, 8);
    w.pod(config_hash(model.config()));
    w.str(serialize_config(model.config()));
    w.pod(static_cast<std::int32_t>(state.step));
    w.pod(static_cast<std::int32_t>(state.epoch));
    w.pod(static_cast<std::int32_t>(state.total_steps));
    w.pod(state.lr);
    w.pod(state.last_loss);
    w.pod(state.best_iou);
    w.pod(state.seed);
    w.str(state.best_checkpoint);
    const auto& params = model.store().parameters();
    w.pod(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, p] : params) {
      w.str(name);
      w.tensor(p.value());
    }
    const auto& bufs = model.store().buffers();
    w.pod(static_cast<std::uint32_t>(bufs.size()));
    for (const auto& [name, b] : bufs) {
      w.str(name);
      w.tensor(b);
    }
    w.pod(static_cast<std::uint8_t>(adam != nullptr));
    if (adam) {
      auto& a = const_cast<Adam<float>&>(*adam);
      w.pod(static_cast<std::int64_t>(a.steps()));
      for (std::size_t i = 0; i < params.size(); ++i) {
        w.tensor(a.first_moments()[i]);
        w.tensor(a.second_moments()[i]);
      }
    }
    if (!w.out) throw std::runtime_error("error writing checkpoint " + path);
  }
  fs::rename(tmp, path);
}

ModelConfig checkpoint_config(const std::string& path) {
  Reader r{std::ifstream(path, std::ios::binary), path};
  if (!r.in) throw std::runtime_error("cannot open checkpoint " + path);
  const Header h = read_header(r);
  ModelConfig cfg = validate_config(parse_config_text(h.config_text));
  if (config_hash(cfg) != h.hash) throw std::runtime_error(path + ": config hash mismatch");
  return cfg;
}

TrainState load_checkpoint(const std::string& path, Model<float>& model, Adam<float>* adam) {
  Reader r{std::ifstream(path, std::ios::binary), path};
  if (!r.in) throw std::runtime_error("cannot open checkpoint " + path);
  const Header h = read_header(r);
  if (h.hash != config_hash(model.config())) {
    throw std::runtime_error(path + ": checkpoint was written for a different config");
  }
  TrainState s;
  s.step = r.pod<std::int32_t>();
  s.epoch = r.pod<std::int32_t>();
  s.total_steps = r.pod<std::int32_t>();
  s.lr = r.pod<double>();
  s.last_loss = r.pod<double>();
  s.best_iou = r.pod<double>();
  s.seed = r.pod<std::uint64_t>();
  s.best_checkpoint = r.str();
  const auto& params = model.store().parameters();
  const auto np = r.pod<std::uint32_t>();
  if (np != params.size()) throw std::runtime_error(path + ": parameter count mismatch");
  for (std::size_t i = 0; i < np; ++i) {
    const std::string name = r.str();
    Tensor<float> t = r.tensor();
    if (name != params[i].first || t.shape() != params[i].second.shape()) {
      throw std::runtime_error(path + ": parameter " + name + " does not match the model");
    }
    auto p = params[i].second;
    p.mutable_value() = std::move(t);
  }
  auto& bufs = model.store().buffers();
  const auto nb = r.pod<std::uint32_t>();
  if (nb != bufs.size()) throw std::runtime_error(path + ": buffer count mismatch");
  for (std::size_t i = 0; i < nb; ++i) {
    const std::string name = r.str();
    Tensor<float> t = r.tensor();
    auto it = bufs.find(name);
    if (it == bufs.end() || it->second.shape() != t.shape()) {
      throw std::runtime_error(path + ": buffer " + name + " does not match the model");
    }
    it->second.storage() = std::move(t.storage());
  }
  const bool has_adam = r.pod<std::uint8_t>() != 0;
  if (adam && has_adam) {
    adam->set_steps(r.pod<std::int64_t>());
    for (std::size_t i = 0; i < params.size(); ++i) {
      adam->first_moments()[i] = r.tensor();
      adam->second_moments()[i] = r.tensor();
    }
  } else if (adam) {
    throw std::runtime_error(path + ": checkpoint has no optimizer state to resume from");
  }
  return s;
}

TrainState train(Model<float>& model, const std::vector<Sample>& train_set,
                 const std::vector<Sample>& val_set, const TrainOptions& opt) {
  const ModelConfig& cfg = model.config();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const int n = static_cast<int>(train_set.size());
  const int bs = std::min(cfg.batch_size, n);
  const int per_epoch = (n + bs - 1) / bs;
  TrainState state;
  state.seed = cfg.seed;
  state.total_steps = opt.max_steps >= 0 ? opt.max_steps : cfg.epochs * per_epoch;
  if (state.total_steps <= 0) throw std::invalid_argument("train: no steps to run");
  Adam<float> adam(model.store());

  const bool files = !opt.out_dir.empty();
  const fs::path dir(opt.out_dir);
  if (files) fs::create_directories(dir);
  const std::string last_path = files ? (dir / "last.ckpt").string() : "";
  const std::string best_path = files ? (dir / "best.ckpt").string() : "";
  if (opt.resume) {
    if (!files || !fs::exists(last_path)) throw std::runtime_error("--resume: no last.ckpt in " + opt.out_dir);
    const int total = state.total_steps;
    state = load_checkpoint(last_path, model, &adam);
    if (state.total_steps != total) throw std::runtime_error("--resume: step budget differs from the checkpoint");
  }
  std::ofstream log;
  if (files) {
    const fs::path log_path = dir / "train_log.csv";
    const bool fresh = !opt.resume || !fs::exists(log_path);
    log.open(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (fresh) log << "step,lr,loss,val_iou,val_pd,val_fa\n";
  }

  std::vector<int> order(n);
  int order_epoch = -1;
  std::vector<Sample> batch_store(bs);
  while (state.step < state.total_steps) {
    const int epoch = state.step / per_epoch;
    const int pos = state.step % per_epoch;
    if (epoch != order_epoch) {
      std::iota(order.begin(), order.end(), 0);
      auto rng = derived_rng(cfg.seed, 0xe90c, static_cast<std::uint64_t>(epoch));
      std::shuffle(order.begin(), order.end(), rng);
      order_epoch = epoch;
    }
    const int begin = pos * bs;
    const int count = std::min(bs, n - begin);
    parallel_for(count, opt.workers, [&](std::size_t k) {
      const Sample& src = train_set[order[begin + k]];
      auto rng = derived_rng(cfg.seed, static_cast<std::uint64_t>(state.step) + 1, k);
      AugmentOptions ao{cfg.input_height, cfg.input_width, std::nullopt, std::nullopt};
      if (!cfg.augment) ao.force_hflip = ao.force_vflip = false;
      auto [img, mask] = augment(src.image, src.mask, rng, ao);
      batch_store[k].image = std::move(img);
      batch_store[k].mask = std::move(mask);
    });
    std::vector<const Sample*> batch;
    for (int k = 0; k < count; ++k) batch.push_back(&batch_store[k]);
    const double lr = lr_at_step(state.step, state.total_steps, cfg.lr_init);
    const double loss = train_step(model, adam, batch, lr);
    if (!std::isfinite(loss)) {
      if (log.is_open()) log << state.step << "," << lr << ",nan,,,\n";
      throw std::runtime_error("non-finite loss at step " + std::to_string(state.step));
    }
    ++state.step;
    state.epoch = state.step / per_epoch;
    state.lr = lr_at_step(state.step, state.total_steps, cfg.lr_init);
    state.last_loss = loss;

    const bool epoch_end = state.step % per_epoch == 0 || state.step == state.total_steps;
    const bool do_eval = opt.evaluate && !val_set.empty() && epoch_end &&
                         ((state.epoch % std::max(1, cfg.eval_interval)) == 0 ||
                          state.step == state.total_steps);
    char line[160];
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g", state.step - 1, lr, loss);
    std::string row = line;
    if (do_eval) {
      const MetricReport r = evaluate_model(model, val_set);
      std::snprintf(line, sizeof line, ",%.9g,%.9g,%.9g", r.iou, r.pd, r.fa);
      row += line;
      if (opt.progress) {
        *opt.progress << "step " << state.step << "/" << state.total_steps << " loss " << loss
                      << " val IoU " << r.iou << " Pd " << r.pd << " Fa " << r.fa << "\n";
      }
      if (r.iou > state.best_iou) {
        state.best_iou = r.iou;
        if (files) {
          state.best_checkpoint = best_path;
          save_checkpoint(best_path, model, nullptr, state);
        }
      }
    } else {
      row += ",,,";
      if (opt.progress && epoch_end) {
        *opt.progress << "step " << state.step << "/" << state.total_steps << " loss " << loss << "\n";
      }
    }
    if (log.is_open()) log << row << "\n" << std::flush;
    if (files && epoch_end) save_checkpoint(last_path, model, &adam, state);
    if (opt.on_step) opt.on_step(state);
  }
  return state;
}

}  // namespace metadec
