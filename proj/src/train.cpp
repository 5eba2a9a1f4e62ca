#include "hiri/train.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "hiri/serialize.hpp"

namespace hiri {

namespace {

void require_pair(const Array& xa, const Array& ya, const Array& xb, const Array& yb) {
  if (xa.rank() != 4) throw DimensionError("mixing expects images [N,3,H,W], got " + shape_string(xa.shape()));
  xa.require_same_shape(xb, "mixing images");
  ya.require_same_shape(yb, "mixing labels");
  if (ya.rank() != 2 || ya.dim(0) != xa.dim(0)) {
    throw DimensionError("mixing labels " + shape_string(ya.shape()) + " do not match images " +
                         shape_string(xa.shape()));
  }
}

Array blend(const Array& a, const Array& b, double lambda) {
  Array out(a.shape());
  for (Index i = 0; i < a.size(); ++i) out[i] = lambda * a[i] + (1.0 - lambda) * b[i];
  return out;
}

Array concat_batch(const Array& a, const Array& b) {
  Shape s = a.shape();
  s[0] += b.dim(0);
  Array out(s);
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + a.size());
  return out;
}

Array slice_batch(const Array& a, Index begin, Index count) {
  Shape s = a.shape();
  s[0] = count;
  Array out(s);
  const Index stride = a.size() / a.dim(0);
  std::copy_n(a.values().begin() + begin * stride, count * stride, out.values().begin());
  return out;
}

Index argmax_row(const Array& m, Index row) {
  const Index k = m.dim(1);
  Index best = 0;
  for (Index j = 1; j < k; ++j) {
    if (m[row * k + j] > m[row * k + best]) best = j;
  }
  return best;
}

void require_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0,1], got " + std::to_string(alpha));
}

}  // namespace

// ------------------------------------------------------------- mixing

double sample_beta(double a, double b, Rng& rng) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x + y == 0.0 ? 0.5 : x / (x + y);
}

Array sample_cutmix_mask(Index height, Index width, Rng& rng) {
  const double area = sample_beta(kCutmixBeta, kCutmixBeta, rng);
  const double side = std::sqrt(area);
  const auto cut_h = static_cast<Index>(static_cast<double>(height) * side);
  const auto cut_w = static_cast<Index>(static_cast<double>(width) * side);
  std::uniform_int_distribution<Index> pick_y(0, height - 1), pick_x(0, width - 1);
  const Index cy = pick_y(rng), cx = pick_x(rng);
  const Index y0 = std::clamp<Index>(cy - cut_h / 2, 0, height), y1 = std::clamp<Index>(cy + cut_h / 2, 0, height);
  const Index x0 = std::clamp<Index>(cx - cut_w / 2, 0, width), x1 = std::clamp<Index>(cx + cut_w / 2, 0, width);
  Array mask({height, width}, 0.0);
  for (Index i = y0; i < y1; ++i)
    for (Index j = x0; j < x1; ++j) mask[i * width + j] = 1.0;
  return mask;
}

MixedSample cutmix_with_mask(const Array& xa, const Array& ya, const Array& xb, const Array& yb, const Array& mask) {
  require_pair(xa, ya, xb, yb);
  const Index n = xa.dim(0), c = xa.dim(1), h = xa.dim(2), w = xa.dim(3);
  if (mask.shape() != Shape{h, w}) {
    throw DimensionError("cutmix mask " + shape_string(mask.shape()) + " does not match image " + std::to_string(h) +
                         "x" + std::to_string(w));
  }
  Index ones = 0;
  for (double m : mask.values()) {
    if (m != 0.0 && m != 1.0) throw ContractError("cutmix mask entries must be 0 or 1");
    ones += m == 1.0;
  }
  MixedSample out;
  out.mask = mask;
  out.lambda = static_cast<double>(ones) / static_cast<double>(h * w);
  out.x = Array(xa.shape());
  const Index plane = h * w;
  for (Index p = 0; p < n * c; ++p)
    for (Index q = 0; q < plane; ++q) {
      const Index i = p * plane + q;
      out.x[i] = mask[q] == 1.0 ? xa[i] : xb[i];
    }
  out.y = blend(ya, yb, out.lambda);
  return out;
}

MixedSample cutmix(const Array& xa, const Array& ya, const Array& xb, const Array& yb, Rng& rng) {
  require_pair(xa, ya, xb, yb);
  return cutmix_with_mask(xa, ya, xb, yb, sample_cutmix_mask(xa.dim(2), xa.dim(3), rng));
}

MixedSample mixup_with_lambda(const Array& xa, const Array& ya, const Array& xb, const Array& yb, double lambda) {
  require_pair(xa, ya, xb, yb);
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("mixup lambda must lie in [0,1]");
  return {blend(xa, xb, lambda), blend(ya, yb, lambda), std::nullopt, lambda};
}

MixedSample mixup(const Array& xa, const Array& ya, const Array& xb, const Array& yb, Rng& rng) {
  return mixup_with_lambda(xa, ya, xb, yb, sample_beta(kMixupBeta, kMixupBeta, rng));
}

// ------------------------------------------------------- distillation

Array downsample_mask(const Array& mask, Index height, Index width) {
  if (mask.rank() != 2) throw DimensionError("mask must be [H,W], got " + shape_string(mask.shape()));
  const Index H = mask.dim(0), W = mask.dim(1);
  if (height < 1 || width < 1 || height > H || width > W) {
    throw DimensionError("cannot reduce a " + std::to_string(H) + "x" + std::to_string(W) + " mask to " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  Array out({height, width});
  for (Index i = 0; i < height; ++i)
    for (Index j = 0; j < width; ++j) {
      const Index r0 = i * H / height, r1 = (i + 1) * H / height;
      const Index c0 = j * W / width, c1 = (j + 1) * W / width;
      Index ones = 0;
      for (Index r = r0; r < r1; ++r)
        for (Index c = c0; c < c1; ++c) ones += mask[r * W + c] == 1.0;
      out[i * width + j] = 2 * ones > (r1 - r0) * (c1 - c0) ? 1.0 : 0.0;
    }
  return out;
}

Array teacher_probability_maps(const Model& model, ParamTree& params, const Array& images) {
  Tape tape(false);
  const Context ctx{tape, params, Mode::Eval};
  return softmax(model.position_logits(ctx, tape.constant(images)), 1).value();
}

DistillTarget mix_teacher_maps(const Array& p_a, const Array& p_b, const MixedSample& sample, double alpha) {
  require_alpha(alpha);
  p_a.require_same_shape(p_b, "teacher maps");
  if (p_a.rank() != 4 || p_a.dim(0) != sample.y.dim(0) || p_a.dim(1) != sample.y.dim(1)) {
    throw DimensionError("teacher maps " + shape_string(p_a.shape()) + " do not match targets " +
                         shape_string(sample.y.shape()));
  }
  const Index n = p_a.dim(0), k = p_a.dim(1), h = p_a.dim(2), w = p_a.dim(3), plane = h * w;
  DistillTarget t;
  t.p_a = p_a;
  t.p_b = p_b;
  t.alpha = alpha;
  t.p_tilde = Array(p_a.shape());
  std::optional<Array> cells;
  if (sample.mask) cells = downsample_mask(*sample.mask, h, w);
  for (Index p = 0; p < n * k; ++p)
    for (Index q = 0; q < plane; ++q) {
      const Index i = p * plane + q;
      const double m = cells ? (*cells)[q] : sample.lambda;
      t.p_tilde[i] = m * p_a[i] + (1.0 - m) * p_b[i];
    }
  t.y_hat = Array({n, k});
  for (Index p = 0; p < n * k; ++p) {
    double s = 0.0;
    for (Index q = 0; q < plane; ++q) s += t.p_tilde[p * plane + q];
    t.y_hat[p] = s / static_cast<double>(plane);
  }
  t.y_bar = Array({n, k});
  for (Index i = 0; i < n * k; ++i) t.y_bar[i] = alpha * sample.y[i] + (1.0 - alpha) * t.y_hat[i];
  return t;
}

DistillTarget distill_target(const Model& teacher, ParamTree& teacher_params, const Array& xa, const Array& xb,
                             const MixedSample& sample, double alpha) {
  require_alpha(alpha);
  if (alpha == 1.0) {
    DistillTarget t;
    t.alpha = alpha;
    t.y_bar = sample.y;
    return t;
  }
  xa.require_same_shape(xb, "distill_target images");
  const Index n = xa.dim(0);
  const Array maps = teacher_probability_maps(teacher, teacher_params, concat_batch(xa, xb));
  return mix_teacher_maps(slice_batch(maps, 0, n), slice_batch(maps, n, n), sample, alpha);
}

// ----------------------------------------------------------------- EMA

EmaState make_ema(const ParamTree& student, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("EMA decay must lie in [0,1]");
  EmaState state{student, decay, 0};
  state.teacher.zero_grad();
  return state;
}

void ema_update(EmaState& state, const ParamTree& student) {
  if (!state.teacher.isomorphic(student)) throw ContractError("EMA teacher and student trees differ in layout");
  const double d = state.decay;
  auto s = student.begin();
  for (auto t = state.teacher.begin(); t != state.teacher.end(); ++t, ++s) {
    Array& tv = t->tensor.data();
    const Array& sv = s->tensor.data();
    for (Index i = 0; i < tv.size(); ++i) tv[i] = d * tv[i] + (1.0 - d) * sv[i];
  }
  ++state.steps;
}

// ----------------------------------------------------------- optimizer

void adamw_update(Array& param, const Array& grad, Array& m, Array& v, std::int64_t t, double lr,
                  const AdamWOptions& o, bool decay) {
  param.require_same_shape(grad, "adamw");
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(t));
  for (Index i = 0; i < param.size(); ++i) {
    if (decay) param[i] -= lr * o.weight_decay * param[i];
    m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * grad[i];
    v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * grad[i] * grad[i];
    param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + o.epsilon);
  }
}

void AdamW::step(ParamTree& params, double lr) {
  if (moments_.empty()) {
    for (const auto& e : params) moments_.push_back({Array(e.tensor.shape()), Array(e.tensor.shape())});
  }
  if (moments_.size() != params.size()) throw ContractError("optimizer state does not match parameter tree");
  ++t_;
  std::size_t i = 0;
  for (auto& e : params) {
    Moments& mo = moments_[i++];
    if (!e.tensor.requires_grad()) continue;
    const Array grad = e.tensor.grad() ? *e.tensor.grad() : Array(e.tensor.shape());
    adamw_update(e.tensor.data(), grad, mo.m, mo.v, t_, lr, opts_, e.tensor.data().rank() >= 2);
  }
}

double cosine_schedule(Index step, Index total_steps, Index warmup_steps, double base_lr) {
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step >= total_steps) return 0.0;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(std::max<Index>(1, total_steps - warmup_steps));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ------------------------------------------------------------- dataset

Array Dataset::batch_images(const std::vector<Index>& indices) const {
  Shape s = images.shape();
  const Index stride = images.size() / s[0];
  s[0] = static_cast<Index>(indices.size());
  Array out(s);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    std::copy_n(images.values().begin() + indices[b] * stride, stride,
                out.values().begin() + static_cast<Index>(b) * stride);
  }
  return out;
}

Array Dataset::batch_targets(const std::vector<Index>& indices) const {
  Array out({static_cast<Index>(indices.size()), num_classes}, 0.0);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    out[static_cast<Index>(b) * num_classes + labels[static_cast<std::size_t>(indices[b])]] = 1.0;
  }
  return out;
}

Dataset synthetic_quadrants(Index count, Index resolution, std::uint64_t seed) {
  if (count < 1 || resolution < 2) throw ConfigError("synthetic dataset needs count >= 1 and resolution >= 2");
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 0.2);
  std::uniform_int_distribution<int> quadrant(0, 3);
  Dataset d;
  d.num_classes = 2;
  d.images = Array({count, 3, resolution, resolution});
  for (double& v : d.images.values()) v = noise(rng);
  const Index half = resolution / 2;
  for (Index n = 0; n < count; ++n) {
    const Index label = n % 2;
    const int q = quadrant(rng);
    const Index r0 = (q / 2) * half, c0 = (q % 2) * half;
    const Index channel = label == 0 ? 0 : 2;
    for (Index i = r0; i < r0 + half; ++i)
      for (Index j = c0; j < c0 + half; ++j) d.images.at(n, channel, i, j) += 1.0;
    d.labels.push_back(label);
  }
  return d;
}

Dataset load_dataset(const std::filesystem::path& path, Index num_classes) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    for (const auto& entry : std::filesystem::directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  if (files.empty()) throw ConfigError("dataset directory " + path.string() + " is empty");

  Dataset d;
  for (const auto& file : files) {
    const Array* images = nullptr;
    const Array* labels = nullptr;
    const auto records = load_records(file);
    for (const auto& r : records) {
      if (r.name == "images") images = &r.value;
      if (r.name == "labels") labels = &r.value;
    }
    if (!images || !labels) throw FormatError(file.string() + ": dataset file needs 'images' and 'labels' records");
    if (images->rank() != 4 || labels->rank() != 1 || labels->dim(0) != images->dim(0)) {
      throw FormatError(file.string() + ": images " + shape_string(images->shape()) + " and labels " +
                        shape_string(labels->shape()) + " do not form a dataset");
    }
    d.images = d.images.size() == 0 ? *images : concat_batch(d.images, *images);
    for (double v : labels->values()) {
      if (v < 0 || v != std::floor(v)) throw FormatError(file.string() + ": labels must be non-negative integers");
      d.labels.push_back(static_cast<Index>(v));
    }
  }
  const Index max_label = *std::max_element(d.labels.begin(), d.labels.end());
  d.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  if (max_label >= d.num_classes) throw FormatError("label " + std::to_string(max_label) + " exceeds class count");
  return d;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  Array labels({data.size()});
  for (Index i = 0; i < data.size(); ++i) labels[i] = static_cast<double>(data.labels[static_cast<std::size_t>(i)]);
  save_records({{"images", data.images}, {"labels", labels}}, path);
}

// ---------------------------------------------------------------- loop

std::string format_metrics(const StepMetrics& m) {
  return fmt::format(R"({{"step":{},"loss":{},"lr":{},"train_acc":{}}})", m.step, m.loss, m.lr, m.train_acc);
}

TrainResult train_loop(const Model& model, ParamTree student, const Dataset& data, const TrainConfig& config,
                       const std::function<void(const StepMetrics&)>& on_step) {
  if (data.size() == 0) throw ConfigError("dataset is empty");
  if (data.num_classes != model.config().num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes) + " classes, model has " +
                      std::to_string(model.config().num_classes));
  }
  if (config.batch_size < 1 || config.steps < 0) throw ConfigError("batch size must be >= 1 and steps >= 0");
  require_alpha(config.alpha);

  Rng rng(config.seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  TrainResult result{std::move(student), {}, {}};
  result.ema = make_ema(result.student, config.ema_decay);
  AdamW optimizer(config.adamw);

  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::size_t cursor = order.size();

  for (Index step = 0; step < config.steps; ++step) {
    std::vector<Index> batch;
    while (static_cast<Index>(batch.size()) < config.batch_size) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    const std::vector<Index> reversed(batch.rbegin(), batch.rend());
    const Array xa = data.batch_images(batch), ya = data.batch_targets(batch);
    const Array xb = data.batch_images(reversed), yb = data.batch_targets(reversed);
    const MixedSample sample = coin(rng) < config.cutmix_prob ? cutmix(xa, ya, xb, yb, rng) : mixup(xa, ya, xb, yb, rng);
    const auto describe = [&] {
      std::string ids;
      for (Index i : batch) ids += (ids.empty() ? "" : ",") + std::to_string(i);
      return "step " + std::to_string(step) + ", batch indices [" + ids + "]";
    };

    StepMetrics m;
    m.step = step;
    m.lr = cosine_schedule(step, config.steps, config.warmup_steps, config.base_lr);

    result.student.zero_grad();
    Tape tape;
    const Context ctx{tape, result.student, Mode::Train};
    Array target;
    Var logits, loss;
    try {
      target = config.use_teacher ? distill_target(model, result.ema.teacher, xa, xb, sample, config.alpha).y_bar
                                  : sample.y;
      logits = model.forward(ctx, tape.constant(sample.x));
      loss = soft_cross_entropy(logits, target);
    } catch (const NumericError& e) {
      throw NumericError(std::string("non-finite values at ") + describe() + ": " + e.what());
    }
    m.loss = loss.value()[0];
    if (!std::isfinite(m.loss)) throw NumericError("non-finite loss at " + describe());
    tape.backward(loss);
    optimizer.step(result.student, m.lr);
    if (config.use_teacher) ema_update(result.ema, result.student);

    Index agree = 0;
    for (Index b = 0; b < logits.dim(0); ++b) agree += argmax_row(logits.value(), b) == argmax_row(sample.y, b);
    m.train_acc = static_cast<double>(agree) / static_cast<double>(logits.dim(0));
    result.metrics.push_back(m);
    if (on_step) on_step(m);
  }
  return result;
}

double evaluate_accuracy(const Model& model, ParamTree& params, const Dataset& data, Index batch_size) {
  if (data.size() == 0) throw ConfigError("dataset is empty");
  Index correct = 0;
  for (Index start = 0; start < data.size(); start += batch_size) {
    std::vector<Index> idx;
    for (Index i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    Tape tape(false);
    const Context ctx{tape, params, Mode::Eval};
    const Array logits = model.forward(ctx, tape.constant(data.batch_images(idx))).value();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      correct += argmax_row(logits, static_cast<Index>(b)) == data.labels[static_cast<std::size_t>(idx[b])];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace hiri
