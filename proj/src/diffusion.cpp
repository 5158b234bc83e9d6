#include "avatar/diffusion.hpp"

#include <cmath>

namespace avatar {

DiffusionSchedule DiffusionSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 2) fail(ErrorKind::Config, "diffusion: need at least 2 steps");
  if (!(beta_start > 0) || !(beta_end < 1) || !(beta_start < beta_end))
    fail(ErrorKind::Config, "diffusion: betas must satisfy 0 < start < end < 1");
  DiffusionSchedule s;
  s.steps_ = steps;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  const auto n = static_cast<std::size_t>(steps) + 1;
  s.betas_.assign(n, 0.0);
  s.alpha_bars_.assign(n, 1.0);
  s.post_var_.assign(n, 0.0);
  s.post_logvar_clipped_.assign(n, 0.0);
  s.coef1_.assign(n, 0.0);
  s.coef2_.assign(n, 0.0);
  for (int t = 1; t <= steps; ++t) {
    s.betas_[t] = beta_start + (beta_end - beta_start) * (t - 1) / (steps - 1);
    s.alpha_bars_[t] = s.alpha_bars_[t - 1] * (1.0 - s.betas_[t]);
  }
  for (int t = 1; t <= steps; ++t) {
    const double ab = s.alpha_bars_[t], ab_prev = s.alpha_bars_[t - 1], b = s.betas_[t];
    s.post_var_[t] = b * (1.0 - ab_prev) / (1.0 - ab);
    s.coef1_[t] = b * std::sqrt(ab_prev) / (1.0 - ab);
    s.coef2_[t] = (1.0 - ab_prev) * std::sqrt(1.0 - b) / (1.0 - ab);
  }
  for (int t = 1; t <= steps; ++t) s.post_logvar_clipped_[t] = std::log(t == 1 ? s.post_var_[2] : s.post_var_[t]);
  return s;
}

DiffusionSchedule DiffusionSchedule::iddpm_linear(int steps) {
  const double scale = 1000.0 / steps;
  return linear(steps, scale * 1e-4, scale * 0.02);
}

void DiffusionSchedule::check_step(int t) const {
  if (t < 1 || t > steps_) fail(ErrorKind::Validation, "diffusion: step " + std::to_string(t) + " outside [1, " +
                                                           std::to_string(steps_) + "]");
}

double DiffusionSchedule::beta(int t) const { return check_step(t), betas_[t]; }
double DiffusionSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  return check_step(t), alpha_bars_[t];
}
double DiffusionSchedule::posterior_variance(int t) const { return check_step(t), post_var_[t]; }
double DiffusionSchedule::posterior_log_variance_clipped(int t) const { return check_step(t), post_logvar_clipped_[t]; }
double DiffusionSchedule::posterior_mean_coef1(int t) const { return check_step(t), coef1_[t]; }
double DiffusionSchedule::posterior_mean_coef2(int t) const { return check_step(t), coef2_[t]; }

double DiffusionSchedule::log_alpha_bar(double t) const {
  if (!(t >= 0.0 && t <= steps_)) fail(ErrorKind::Validation, "diffusion: continuous time outside [0, T]");
  const int lo = static_cast<int>(std::floor(t));
  if (lo >= steps_) return std::log(alpha_bars_[steps_]);
  const double f = t - lo;
  return (1.0 - f) * std::log(alpha_bars_[lo]) + f * std::log(alpha_bars_[lo + 1]);
}

double DiffusionSchedule::sigma(double t) const { return std::sqrt(-std::expm1(log_alpha_bar(t))); }

double DiffusionSchedule::lambda(double t) const { return log_alpha(t) - std::log(sigma(t)); }

json DiffusionSchedule::to_json() const {
  return json{{"kind", "linear"}, {"steps", steps_}, {"beta_start", beta_start_}, {"beta_end", beta_end_}};
}

DiffusionSchedule DiffusionSchedule::from_json(const json& j) {
  if (j.value("kind", std::string("linear")) != "linear") fail(ErrorKind::Config, "diffusion: only linear schedules");
  return linear(j.at("steps").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

namespace {

// Gathers a per-step coefficient into a tensor broadcastable against `like`.
torch::Tensor gather(const DiffusionSchedule& s, const torch::Tensor& t, const torch::Tensor& like,
                     double (DiffusionSchedule::*fn)(int) const) {
  auto tt = t.to(torch::kInt64).contiguous();
  if (tt.dim() != 1 || tt.size(0) != like.size(0))
    fail(ErrorKind::Shape, "diffusion: need one step per batch element, got " + shape_string(t));
  std::vector<double> vals(static_cast<std::size_t>(tt.size(0)));
  const auto* p = tt.data_ptr<std::int64_t>();
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = (s.*fn)(static_cast<int>(p[i]));
  std::vector<std::int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
  shape[0] = tt.size(0);
  return torch::tensor(vals, torch::kFloat64).view(shape).to(like.scalar_type());
}

}  // namespace

torch::Tensor q_sample(const DiffusionSchedule& s, const torch::Tensor& x0, const torch::Tensor& t,
                       const torch::Tensor& noise) {
  if (x0.sizes() != noise.sizes()) fail(ErrorKind::Shape, "q_sample: noise shape differs from x0");
  auto ab = gather(s, t, x0, &DiffusionSchedule::alpha_bar);
  if (t.to(torch::kInt64).min().item<std::int64_t>() < 1) fail(ErrorKind::Validation, "q_sample: t must be >= 1");
  return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise;
}

torch::Tensor q_sample(const DiffusionSchedule& s, const torch::Tensor& x0, int t, const torch::Tensor& noise) {
  if (x0.sizes() != noise.sizes()) fail(ErrorKind::Shape, "q_sample: noise shape differs from x0");
  if (t < 1) fail(ErrorKind::Validation, "q_sample: t must be >= 1");
  const double ab = s.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

torch::Tensor gaussian_kl(const torch::Tensor& mean1, const torch::Tensor& logvar1, const torch::Tensor& mean2,
                          const torch::Tensor& logvar2) {
  return 0.5 * (-1.0 + logvar2 - logvar1 + torch::exp(logvar1 - logvar2) + (mean1 - mean2).pow(2) * torch::exp(-logvar2));
}

torch::Tensor model_log_variance(const DiffusionSchedule& s, const torch::Tensor& v, const torch::Tensor& t) {
  auto log_beta = gather(s, t, v, &DiffusionSchedule::beta).log();
  auto log_post = gather(s, t, v, &DiffusionSchedule::posterior_log_variance_clipped);
  return v * log_beta + (1.0 - v) * log_post;
}

IddpmLoss iddpm_loss(const DiffusionSchedule& s, const ModelPrediction& pred, const torch::Tensor& x0,
                     const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& noise, double lambda_vlb) {
  if (pred.eps.sizes() != x0.sizes() || pred.v.sizes() != x0.sizes() || x_t.sizes() != x0.sizes() ||
      noise.sizes() != x0.sizes())
    fail(ErrorKind::Shape, "iddpm_loss: prediction/latent shapes disagree");
  IddpmLoss out;
  out.l_simple = (pred.eps - noise).pow(2).mean();

  auto ab = gather(s, t, x0, &DiffusionSchedule::alpha_bar);
  auto c1 = gather(s, t, x0, &DiffusionSchedule::posterior_mean_coef1);
  auto c2 = gather(s, t, x0, &DiffusionSchedule::posterior_mean_coef2);
  auto true_mean = c1 * x0 + c2 * x_t;
  auto true_logvar = gather(s, t, x0, &DiffusionSchedule::posterior_log_variance_clipped).expand_as(x0);

  // The variance head learns through l_vlb; the mean is trained by l_simple only.
  auto eps = pred.eps.detach();
  auto x0_pred = (x_t - (1.0 - ab).sqrt() * eps) / ab.sqrt();
  auto model_mean = c1 * x0_pred + c2 * x_t;
  auto model_logvar = model_log_variance(s, pred.v, t);
  out.l_vlb = gaussian_kl(true_mean, true_logvar, model_mean, model_logvar).mean();
  out.total = out.l_simple + lambda_vlb * out.l_vlb;
  return out;
}

torch::Tensor cfg_combine(const torch::Tensor& eps_uncond, const torch::Tensor& eps_cond, double scale) {
  if (eps_uncond.sizes() != eps_cond.sizes()) fail(ErrorKind::Shape, "cfg_combine: shapes differ");
  // Written as (1-s)u + s c so that s = 0 and s = 1 reproduce the inputs bit-exactly.
  return (1.0 - scale) * eps_uncond + scale * eps_cond;
}

double DiffusionSchedule::time_for_lambda(double target) const {
  // λ(t) is strictly decreasing; bisection on the interpolated schedule.
  double lo = 0.0, hi = steps_;
  if (target >= lambda(1e-12)) return 0.0;
  if (target <= lambda(hi)) return hi;
  for (int i = 0; i < 200 && hi - lo > 1e-12; ++i) {
    const double mid = 0.5 * (lo + hi);
    (lambda(mid) > target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<double> solver_timesteps(const DiffusionSchedule& s, int n_steps) {
  if (n_steps < 1) fail(ErrorKind::Validation, "dpm_solver: n_steps must be >= 1");
  const double t_start = s.steps(), t_end = 1.0;
  const double l_start = s.lambda(t_start), l_end = s.lambda(t_end);
  std::vector<double> ts(static_cast<std::size_t>(n_steps) + 1);
  for (int i = 0; i <= n_steps; ++i) ts[i] = s.time_for_lambda(l_start + (l_end - l_start) * i / n_steps);
  ts.front() = t_start;
  ts.back() = t_end;
  return ts;
}

torch::Tensor dpm_solver_sample(const EpsModel& model, const DiffusionSchedule& s, int n_steps, double guidance,
                                const torch::Tensor& x_T) {
  const auto ts = solver_timesteps(s, n_steps);
  auto guided = [&](const torch::Tensor& x, double t) {
    if (guidance == 1.0) return model(x, t, true);
    return cfg_combine(model(x, t, false), model(x, t, true), guidance);
  };

  torch::Tensor x = x_T;
  torch::Tensor eps_prev, eps_prev2;
  for (int i = 1; i <= n_steps; ++i) {
    const double t_prev = ts[i - 1], t = ts[i];
    eps_prev2 = eps_prev;
    eps_prev = guided(x, t_prev);
    const double h = s.lambda(t) - s.lambda(t_prev);
    const double ratio = std::exp(s.log_alpha(t) - s.log_alpha(t_prev));
    const double phi = s.sigma(t) * std::expm1(h);
    if (i == 1) {
      x = ratio * x - phi * eps_prev;
    } else {
      const double h0 = s.lambda(t_prev) - s.lambda(ts[i - 2]);
      const double r0 = h0 / h;
      auto d1 = (eps_prev - eps_prev2) / r0;
      x = ratio * x - phi * eps_prev - 0.5 * phi * d1;
    }
  }
  return x;
}

}  // namespace avatar
