#include "iexplain/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

#include "iexplain/errors.hpp"
#include "iexplain/rng.hpp"

namespace iexplain {

namespace {

// Forward activations plus the argmax bookkeeping backward needs. Index
// spaces: a1 = ((z*H + y)*W + x)*c1 + c, p1 likewise over (W2, H2),
// a2 over (W2, H2) with c2, p2 over (W4, H4) with c2. Pool argmaxes store
// full linear indices into the layer below.
template <typename T>
struct Workspace {
    int w = 0, h = 0, d = 0;
    int w2 = 0, h2 = 0, w4 = 0, h4 = 0;
    std::vector<T> params;  // all weights widened to T, same packing order
    std::vector<T> a1, p1, a2, p2;
    std::vector<std::uint32_t> p1_arg, p2_arg;
    std::vector<std::uint32_t> g_arg;  // per channel, into a2
    std::vector<T> features;           // global-max features
    T logit = 0;

    // backward scratch
    std::vector<T> d_p1;
    std::vector<std::uint8_t> touched_flag;   // per p1 spatial cell
    std::vector<std::uint32_t> touched_list;  // p1 spatial indices
};

template <typename T>
struct ParamRefs {
    const T* w1;
    const T* b1;
    const T* w2;
    const T* b2;
    const T* fc_w;
    T fc_b;
};

template <typename T>
ParamRefs<T> widen_params(const ClassifierParams& p, std::vector<T>& store) {
    store.clear();
    store.reserve(p.param_count());
    auto push = [&store](const std::vector<float>& v) {
        for (float x : v) store.push_back(static_cast<T>(x));
    };
    push(p.conv1_w);
    push(p.conv1_b);
    push(p.conv2_w);
    push(p.conv2_b);
    push(p.fc_w);
    ParamRefs<T> r;
    const T* base = store.data();
    r.w1 = base;
    r.b1 = r.w1 + p.conv1_w.size();
    r.w2 = r.b1 + p.conv1_b.size();
    r.b2 = r.w2 + p.conv2_w.size();
    r.fc_w = r.b2 + p.conv2_b.size();
    r.fc_b = static_cast<T>(p.fc_b);
    return r;
}

void check_input(const ClassifierParams& params, const MiniVolume& mini) {
    params.validate();
    const Volume& v = mini.volume;
    if (v.depth != params.input_depth) {
        throw ShapeError("classifier: input depth " + std::to_string(v.depth) +
                         " does not match architecture depth " +
                         std::to_string(params.input_depth));
    }
    if (v.width < 4 || v.height < 4) {
        throw ShapeError("classifier: in-plane dims must be >= 4, got " +
                         std::to_string(v.width) + "x" + std::to_string(v.height));
    }
    v.require_finite("classifier input");
}

// Fixed-channel-count kernel. MB output voxels along x are computed together so
// each (tap, c_in) weight row is loaded once and the accumulator block stays in
// registers across all 27 taps; block sizes below were picked by benchmark.
// Per-voxel accumulation order (dz, dy, dx, c_in) matches the generic kernel.
template <typename T, int CI, int CO, int MB>
void conv3x3x3_fixed(const T* __restrict in, int w, int h, int d, const T* __restrict wts,
                     const T* __restrict bias, std::vector<T>& out_v) {
    out_v.assign(static_cast<std::size_t>(w) * h * d * CO, T(0));
    T* __restrict out = out_v.data();
    for (int z = 0; z < d; ++z) {
        const int dz0 = z > 0 ? -1 : 0;
        const int dz1 = z < d - 1 ? 1 : 0;
        for (int y = 0; y < h; ++y) {
            const int dy0 = y > 0 ? -1 : 0;
            const int dy1 = y < h - 1 ? 1 : 0;
            T* __restrict orow = out + static_cast<std::size_t>((z * h + y)) * w * CO;
            int x = 1;
            // Interior blocks: x in [1, w-1-MB] keeps every dx in range.
            for (; x + MB <= w - 1; x += MB) {
                T acc[MB][CO];
                for (int m = 0; m < MB; ++m)
                    for (int c = 0; c < CO; ++c) acc[m][c] = bias[c];
                for (int dz = dz0; dz <= dz1; ++dz) {
                    for (int dy = dy0; dy <= dy1; ++dy) {
                        const T* __restrict irow =
                            in + (static_cast<std::size_t>(((z + dz) * h + y + dy)) * w + x) * CI;
                        const int kbase = ((dz + 1) * 3 + dy + 1) * 3 + 1;
                        for (int dx = -1; dx <= 1; ++dx) {
                            const T* __restrict src = irow + static_cast<std::ptrdiff_t>(dx) * CI;
                            const T* __restrict wk =
                                wts + static_cast<std::size_t>(kbase + dx) * CI * CO;
                            for (int c_in = 0; c_in < CI; ++c_in) {
                                const T* __restrict wrow = wk + static_cast<std::size_t>(c_in) * CO;
                                for (int m = 0; m < MB; ++m) {
                                    const T v = src[static_cast<std::size_t>(m) * CI + c_in];
                                    for (int c = 0; c < CO; ++c) acc[m][c] += v * wrow[c];
                                }
                            }
                        }
                    }
                }
                for (int m = 0; m < MB; ++m)
                    for (int c = 0; c < CO; ++c) {
                        const T a = acc[m][c];
                        orow[static_cast<std::size_t>(x + m) * CO + c] = a > T(0) ? a : T(0);
                    }
            }
            // x == 0, the block tail, and x == w-1 need dx range checks.
            auto scalar_at = [&](int xs) {
                T acc[CO];
                for (int c = 0; c < CO; ++c) acc[c] = bias[c];
                const int dx0 = xs > 0 ? -1 : 0;
                const int dx1 = xs < w - 1 ? 1 : 0;
                for (int dz = dz0; dz <= dz1; ++dz) {
                    for (int dy = dy0; dy <= dy1; ++dy) {
                        const std::size_t row =
                            static_cast<std::size_t>(((z + dz) * h + y + dy)) * w + xs;
                        const int kbase = ((dz + 1) * 3 + dy + 1) * 3 + 1;
                        for (int dx = dx0; dx <= dx1; ++dx) {
                            const T* __restrict src =
                                in + (row + static_cast<std::size_t>(dx)) * CI;
                            const T* __restrict wk =
                                wts + static_cast<std::size_t>(kbase + dx) * CI * CO;
                            for (int c_in = 0; c_in < CI; ++c_in) {
                                const T v = src[c_in];
                                const T* __restrict wrow = wk + static_cast<std::size_t>(c_in) * CO;
                                for (int c = 0; c < CO; ++c) acc[c] += v * wrow[c];
                            }
                        }
                    }
                }
                for (int c = 0; c < CO; ++c)
                    orow[static_cast<std::size_t>(xs) * CO + c] = acc[c] > T(0) ? acc[c] : T(0);
            };
            scalar_at(0);
            for (int xs = x; xs < w; ++xs) scalar_at(xs);
        }
    }
}

// Runtime channel counts; accumulates in the output buffer.
template <typename T>
void conv3x3x3(const T* in, int w, int h, int d, int ci, const T* wts, const T* bias, int co,
               std::vector<T>& out) {
    out.assign(static_cast<std::size_t>(w) * h * d * co, T(0));
    for (int z = 0; z < d; ++z) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                T* acc = out.data() + (static_cast<std::size_t>((z * h + y)) * w + x) * co;
                for (int c = 0; c < co; ++c) acc[c] = bias[c];
                for (int dz = -1; dz <= 1; ++dz) {
                    const int zz = z + dz;
                    if (zz < 0 || zz >= d) continue;
                    for (int dy = -1; dy <= 1; ++dy) {
                        const int yy = y + dy;
                        if (yy < 0 || yy >= h) continue;
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int xx = x + dx;
                            if (xx < 0 || xx >= w) continue;
                            const int k = ((dz + 1) * 3 + dy + 1) * 3 + dx + 1;
                            const T* src =
                                in + (static_cast<std::size_t>((zz * h + yy)) * w + xx) * ci;
                            const T* wk = wts + static_cast<std::size_t>(k) * ci * co;
                            for (int c_in = 0; c_in < ci; ++c_in) {
                                const T v = src[c_in];
                                const T* wrow = wk + static_cast<std::size_t>(c_in) * co;
                                for (int c = 0; c < co; ++c) acc[c] += v * wrow[c];
                            }
                        }
                    }
                }
                for (int c = 0; c < co; ++c) acc[c] = acc[c] > T(0) ? acc[c] : T(0);
            }
        }
    }
}

// 2x2x1 floor-mode max pool; argmax keeps the lowest linear source index.
template <typename T>
void maxpool2x2(const std::vector<T>& in, int w, int h, int d, int ch, std::vector<T>& out,
                std::vector<std::uint32_t>& arg) {
    const int wo = w / 2, ho = h / 2;
    out.assign(static_cast<std::size_t>(wo) * ho * d * ch, T(0));
    arg.assign(out.size(), 0);
    for (int z = 0; z < d; ++z) {
        for (int yo = 0; yo < ho; ++yo) {
            for (int xo = 0; xo < wo; ++xo) {
                const std::size_t o = (static_cast<std::size_t>((z * ho + yo)) * wo + xo) * ch;
                for (int c = 0; c < ch; ++c) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::uint32_t best_idx = 0;
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::size_t idx =
                                (static_cast<std::size_t>((z * h + 2 * yo + dy)) * w + 2 * xo +
                                 dx) *
                                    ch +
                                c;
                            if (in[idx] > best) {
                                best = in[idx];
                                best_idx = static_cast<std::uint32_t>(idx);
                            }
                        }
                    }
                    out[o + c] = best;
                    arg[o + c] = best_idx;
                }
            }
        }
    }
}

template <typename T>
void forward_impl(const ClassifierParams& p, const MiniVolume& mini, Workspace<T>& ws) {
    const Volume& vol = mini.volume;
    ws.w = vol.width;
    ws.h = vol.height;
    ws.d = vol.depth;
    ws.w2 = ws.w / 2;
    ws.h2 = ws.h / 2;
    ws.w4 = ws.w2 / 2;
    ws.h4 = ws.h2 / 2;
    const ParamRefs<T> pr = widen_params<T>(p, ws.params);

    std::vector<T> input;
    const T* in_ptr;
    if constexpr (std::is_same_v<T, float>) {
        in_ptr = vol.data.data();
    } else {
        input.assign(vol.data.begin(), vol.data.end());
        in_ptr = input.data();
    }

    if (p.c1 == 8 && p.c2 == 16) {  // default architecture, register-blocked kernels
        conv3x3x3_fixed<T, 1, 8, 16>(in_ptr, ws.w, ws.h, ws.d, pr.w1, pr.b1, ws.a1);
        maxpool2x2<T>(ws.a1, ws.w, ws.h, ws.d, p.c1, ws.p1, ws.p1_arg);
        conv3x3x3_fixed<T, 8, 16, 6>(ws.p1.data(), ws.w2, ws.h2, ws.d, pr.w2, pr.b2, ws.a2);
    } else {
        conv3x3x3<T>(in_ptr, ws.w, ws.h, ws.d, 1, pr.w1, pr.b1, p.c1, ws.a1);
        maxpool2x2<T>(ws.a1, ws.w, ws.h, ws.d, p.c1, ws.p1, ws.p1_arg);
        conv3x3x3<T>(ws.p1.data(), ws.w2, ws.h2, ws.d, p.c1, pr.w2, pr.b2, p.c2, ws.a2);
    }
    maxpool2x2<T>(ws.a2, ws.w2, ws.h2, ws.d, p.c2, ws.p2, ws.p2_arg);

    ws.features.assign(static_cast<std::size_t>(p.c2), T(0));
    ws.g_arg.assign(static_cast<std::size_t>(p.c2), 0);
    std::vector<T> best(static_cast<std::size_t>(p.c2),
                        -std::numeric_limits<T>::infinity());
    const std::size_t cells = ws.p2.size() / static_cast<std::size_t>(p.c2);
    for (std::size_t s = 0; s < cells; ++s) {
        const T* row = ws.p2.data() + s * p.c2;
        for (int c = 0; c < p.c2; ++c) {
            if (row[c] > best[static_cast<std::size_t>(c)]) {
                best[static_cast<std::size_t>(c)] = row[c];
                ws.g_arg[static_cast<std::size_t>(c)] = ws.p2_arg[s * p.c2 + c];
            }
        }
    }
    ws.logit = pr.fc_b;
    for (int c = 0; c < p.c2; ++c) {
        ws.features[static_cast<std::size_t>(c)] = best[static_cast<std::size_t>(c)];
        ws.logit += pr.fc_w[c] * best[static_cast<std::size_t>(c)];
    }
}

template <typename T>
struct ParamGrads {
    std::vector<T> w1, b1, w2, b2, fc_w;
    T fc_b = 0;

    void resize_for(const ClassifierParams& p) {
        w1.assign(p.conv1_w.size(), T(0));
        b1.assign(p.conv1_b.size(), T(0));
        w2.assign(p.conv2_w.size(), T(0));
        b2.assign(p.conv2_b.size(), T(0));
        fc_w.assign(p.fc_w.size(), T(0));
        fc_b = T(0);
    }
};

// Reverse pass from d(logit) = scale. The global max pool makes gradients
// sparse: at most c2 positions in a2 receive gradient, so the pass scatters
// through touched positions only instead of sweeping whole layers.
// d_input (when non-null) accumulates; param grads (when non-null) too.
template <typename T>
void backward_impl(const ClassifierParams& p, const MiniVolume& mini, Workspace<T>& ws, T scale,
                   std::vector<T>* d_input, ParamGrads<T>* d_params) {
    const ParamRefs<T> pr = widen_params<T>(p, ws.params);
    const Volume& vol = mini.volume;

    if (d_params) {
        d_params->fc_b += scale;
        for (int c = 0; c < p.c2; ++c) {
            d_params->fc_w[static_cast<std::size_t>(c)] +=
                scale * ws.features[static_cast<std::size_t>(c)];
        }
    }

    ws.d_p1.assign(ws.p1.size(), T(0));
    ws.touched_flag.assign(ws.p1.size() / static_cast<std::size_t>(p.c1), 0);
    ws.touched_list.clear();

    // logit -> a2 (through global max and pool2), then conv2 -> d_p1.
    for (int co = 0; co < p.c2; ++co) {
        const T g = scale * pr.fc_w[co];
        if (g == T(0)) continue;
        const std::size_t a2_idx = ws.g_arg[static_cast<std::size_t>(co)];
        if (!(ws.a2[a2_idx] > T(0))) continue;  // ReLU gate
        const std::size_t spatial = a2_idx / static_cast<std::size_t>(p.c2);
        const int x = static_cast<int>(spatial % static_cast<std::size_t>(ws.w2));
        const int y = static_cast<int>((spatial / static_cast<std::size_t>(ws.w2)) %
                                       static_cast<std::size_t>(ws.h2));
        const int z = static_cast<int>(spatial / (static_cast<std::size_t>(ws.w2) *
                                                  static_cast<std::size_t>(ws.h2)));
        if (d_params) d_params->b2[static_cast<std::size_t>(co)] += g;
        for (int dz = -1; dz <= 1; ++dz) {
            const int zz = z + dz;
            if (zz < 0 || zz >= ws.d) continue;
            for (int dy = -1; dy <= 1; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= ws.h2) continue;
                for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= ws.w2) continue;
                    const int k = ((dz + 1) * 3 + dy + 1) * 3 + dx + 1;
                    const std::size_t nsp =
                        static_cast<std::size_t>((zz * ws.h2 + yy)) * ws.w2 + xx;
                    const std::size_t base = nsp * static_cast<std::size_t>(p.c1);
                    if (!ws.touched_flag[nsp]) {
                        ws.touched_flag[nsp] = 1;
                        ws.touched_list.push_back(static_cast<std::uint32_t>(nsp));
                    }
                    for (int ci = 0; ci < p.c1; ++ci) {
                        const std::size_t widx =
                            (static_cast<std::size_t>(k) * p.c1 + ci) * p.c2 + co;
                        ws.d_p1[base + ci] += g * pr.w2[widx];
                        if (d_params) d_params->w2[widx] += g * ws.p1[base + ci];
                    }
                }
            }
        }
    }

    // d_p1 -> a1 (through pool1 argmax and ReLU) -> conv1 -> input.
    for (std::uint32_t nsp : ws.touched_list) {
        const std::size_t base = static_cast<std::size_t>(nsp) * p.c1;
        for (int ci = 0; ci < p.c1; ++ci) {
            const T g = ws.d_p1[base + ci];
            if (g == T(0)) continue;
            const std::size_t a1_idx = ws.p1_arg[base + ci];
            if (!(ws.a1[a1_idx] > T(0))) continue;
            const std::size_t sp1 = a1_idx / static_cast<std::size_t>(p.c1);
            const int x = static_cast<int>(sp1 % static_cast<std::size_t>(ws.w));
            const int y = static_cast<int>((sp1 / static_cast<std::size_t>(ws.w)) %
                                           static_cast<std::size_t>(ws.h));
            const int z = static_cast<int>(sp1 / (static_cast<std::size_t>(ws.w) *
                                                  static_cast<std::size_t>(ws.h)));
            if (d_params) d_params->b1[static_cast<std::size_t>(ci)] += g;
            for (int dz = -1; dz <= 1; ++dz) {
                const int zz = z + dz;
                if (zz < 0 || zz >= ws.d) continue;
                for (int dy = -1; dy <= 1; ++dy) {
                    const int yy = y + dy;
                    if (yy < 0 || yy >= ws.h) continue;
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int xx = x + dx;
                        if (xx < 0 || xx >= ws.w) continue;
                        const int k = ((dz + 1) * 3 + dy + 1) * 3 + dx + 1;
                        const std::size_t in_idx =
                            static_cast<std::size_t>((zz * ws.h + yy)) * ws.w + xx;
                        const std::size_t widx = static_cast<std::size_t>(k) * p.c1 + ci;
                        if (d_input) (*d_input)[in_idx] += g * pr.w1[widx];
                        if (d_params) {
                            d_params->w1[widx] +=
                                g * static_cast<T>(vol.data[in_idx]);
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
Workspace<T>& workspace() {
    thread_local Workspace<T> ws;
    return ws;
}

double sigmoid_stable(double logit) {
    if (logit >= 0.0) {
        return 1.0 / (1.0 + std::exp(-logit));
    }
    const double e = std::exp(logit);
    return e / (1.0 + e);
}

// softplus(l) - y*l, stable for large |l|.
double bce_from_logit(double logit, double y) {
    const double sp = logit > 0.0 ? logit + std::log1p(std::exp(-logit))
                                  : std::log1p(std::exp(logit));
    return sp - y * logit;
}

}  // namespace

std::size_t ClassifierParams::param_count() const {
    return conv1_w.size() + conv1_b.size() + conv2_w.size() + conv2_b.size() + fc_w.size() + 1;
}

void ClassifierParams::validate() const {
    if (c1 <= 0 || c2 <= 0 || input_depth <= 0) {
        throw ShapeError("classifier params: channel counts and depth must be positive");
    }
    const std::size_t k = 27;
    if (conv1_w.size() != k * static_cast<std::size_t>(c1) ||
        conv1_b.size() != static_cast<std::size_t>(c1) ||
        conv2_w.size() != k * static_cast<std::size_t>(c1) * static_cast<std::size_t>(c2) ||
        conv2_b.size() != static_cast<std::size_t>(c2) ||
        fc_w.size() != static_cast<std::size_t>(c2)) {
        throw ShapeError("classifier params: tensor sizes do not match architecture");
    }
    auto finite = [](const std::vector<float>& v) {
        return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
    };
    if (!finite(conv1_w) || !finite(conv1_b) || !finite(conv2_w) || !finite(conv2_b) ||
        !finite(fc_w) || !std::isfinite(fc_b)) {
        throw DataError("classifier params: non-finite parameter");
    }
}

ClassifierParams init_params(int c1, int c2, std::uint64_t seed) {
    if (c1 <= 0 || c2 <= 0) {
        throw ConfigError("init_params: channel counts must be positive");
    }
    ClassifierParams p;
    p.c1 = c1;
    p.c2 = c2;
    Rng rng(seed);
    auto fill = [&rng](std::vector<float>& v, std::size_t n, double sigma) {
        v.resize(n);
        for (auto& x : v) x = static_cast<float>(sigma * rng.normal());
    };
    fill(p.conv1_w, 27u * static_cast<std::size_t>(c1), std::sqrt(2.0 / 27.0));
    p.conv1_b.assign(static_cast<std::size_t>(c1), 0.0f);
    fill(p.conv2_w, 27u * static_cast<std::size_t>(c1) * static_cast<std::size_t>(c2),
         std::sqrt(2.0 / (27.0 * c1)));
    p.conv2_b.assign(static_cast<std::size_t>(c2), 0.0f);
    fill(p.fc_w, static_cast<std::size_t>(c2), std::sqrt(1.0 / c2));
    p.fc_b = 0.0f;
    return p;
}

void TrainConfig::validate() const {
    if (c1 <= 0 || c2 <= 0) throw ConfigError("train: channel counts must be positive");
    if (learning_rate <= 0.0) throw ConfigError("train: learning_rate must be > 0");
    if (iterations <= 0) throw ConfigError("train: iterations must be > 0");
    if (batch_size <= 0) throw ConfigError("train: batch_size must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
    if (cutout_prob < 0.0 || cutout_prob > 1.0) {
        throw ConfigError("train: cutout_prob must be in [0, 1]");
    }
    if (cutout_min < 1 || cutout_max < cutout_min) {
        throw ConfigError("train: invalid cutout patch range");
    }
}

Prediction forward(const ClassifierParams& params, const MiniVolume& mini) {
    check_input(params, mini);
    auto& ws = workspace<float>();
    forward_impl<float>(params, mini, ws);
    Prediction out;
    out.logit = ws.logit;
    out.prob = static_cast<float>(sigmoid_stable(ws.logit));
    return out;
}

double forward_logit_f64(const ClassifierParams& params, const MiniVolume& mini) {
    check_input(params, mini);
    auto& ws = workspace<double>();
    forward_impl<double>(params, mini, ws);
    return ws.logit;
}

Volume input_gradient(const ClassifierParams& params, const MiniVolume& mini) {
    check_input(params, mini);
    auto& ws = workspace<float>();
    forward_impl<float>(params, mini, ws);
    Volume grad(mini.volume.width, mini.volume.height, mini.volume.depth);
    grad.spacing = mini.volume.spacing;
    backward_impl<float>(params, mini, ws, 1.0f, &grad.data, nullptr);
    return grad;
}

std::vector<double> input_gradient_f64(const ClassifierParams& params, const MiniVolume& mini) {
    check_input(params, mini);
    auto& ws = workspace<double>();
    forward_impl<double>(params, mini, ws);
    std::vector<double> grad(mini.volume.size(), 0.0);
    backward_impl<double>(params, mini, ws, 1.0, &grad, nullptr);
    return grad;
}

ClassifierParams train(const std::vector<SliceSample>& dataset, const TrainConfig& cfg,
                       std::vector<float>* loss_curve) {
    cfg.validate();
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (dataset[i].study == nullptr) {
            throw PreconditionError("train: null study pointer in dataset");
        }
        (dataset[i].label ? pos : neg).push_back(i);
    }
    if (pos.empty() || neg.empty()) {
        throw DataError("train: dataset must contain both classes");
    }

    ClassifierParams params = init_params(cfg.c1, cfg.c2, cfg.seed);
    Rng rng = Rng(cfg.seed).split(1);

    ParamGrads<float> grads;
    ParamGrads<float> vel;
    vel.resize_for(params);
    auto& ws = workspace<float>();
    if (loss_curve) loss_curve->clear();

    const int n_pos_batch = (cfg.batch_size + 1) / 2;
    const float lr = static_cast<float>(cfg.learning_rate);
    const float mu = static_cast<float>(cfg.momentum);

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        grads.resize_for(params);
        double loss_sum = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const bool want_pos = b < n_pos_batch;
            const auto& pool = want_pos ? pos : neg;
            const std::size_t pick = pool[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
            const SliceSample& s = dataset[pick];
            MiniVolume mini = extract_minivolume(*s.study, s.slice);

            if (rng.next_double() < cfg.cutout_prob) {
                Volume& v = mini.volume;
                const int side_x = std::min(v.width, rng.uniform_int(cfg.cutout_min,
                                                                     cfg.cutout_max));
                const int side_y = std::min(v.height, rng.uniform_int(cfg.cutout_min,
                                                                      cfg.cutout_max));
                const int x0 = rng.uniform_int(0, v.width - side_x);
                const int y0 = rng.uniform_int(0, v.height - side_y);
                for (int z = 0; z < v.depth; ++z) {
                    for (int y = y0; y < y0 + side_y; ++y) {
                        float* row = v.data.data() +
                                     (static_cast<std::size_t>(z) * v.height + y) * v.width;
                        std::fill(row + x0, row + x0 + side_x, 0.0f);
                    }
                }
            }

            forward_impl<float>(params, mini, ws);
            const double y = s.label ? 1.0 : 0.0;
            loss_sum += bce_from_logit(ws.logit, y);
            const float d_logit = static_cast<float>(
                (sigmoid_stable(ws.logit) - y) / cfg.batch_size);
            backward_impl<float>(params, mini, ws, d_logit, nullptr, &grads);
        }
        if (loss_curve) {
            loss_curve->push_back(static_cast<float>(loss_sum / cfg.batch_size));
        }

        auto step = [lr, mu](std::vector<float>& w, std::vector<float>& v,
                             const std::vector<float>& g) {
            for (std::size_t i = 0; i < w.size(); ++i) {
                v[i] = mu * v[i] + g[i];
                w[i] -= lr * v[i];
            }
        };
        step(params.conv1_w, vel.w1, grads.w1);
        step(params.conv1_b, vel.b1, grads.b1);
        step(params.conv2_w, vel.w2, grads.w2);
        step(params.conv2_b, vel.b2, grads.b2);
        step(params.fc_w, vel.fc_w, grads.fc_w);
        vel.fc_b = mu * vel.fc_b + grads.fc_b;
        params.fc_b -= lr * vel.fc_b;
    }
    return params;
}

double finite_diff_check(const ClassifierParams& params, const MiniVolume& mini, double eps,
                         int sample_voxels, std::uint64_t seed) {
    if (eps <= 0.0) throw PreconditionError("finite_diff_check: eps must be > 0");
    if (sample_voxels <= 0) throw PreconditionError("finite_diff_check: sample size must be > 0");
    check_input(params, mini);

    const std::vector<double> grad = input_gradient_f64(params, mini);
    const std::size_t total = mini.volume.size();

    std::vector<std::size_t> indices;
    if (total <= static_cast<std::size_t>(sample_voxels)) {
        indices.resize(total);
        for (std::size_t i = 0; i < total; ++i) indices[i] = i;
    } else {
        Rng rng(seed);
        std::unordered_set<std::size_t> seen;
        while (seen.size() < static_cast<std::size_t>(sample_voxels)) {
            seen.insert(static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(total) - 1)));
        }
        indices.assign(seen.begin(), seen.end());
        std::sort(indices.begin(), indices.end());
    }

    MiniVolume probe = mini;
    double max_rel = 0.0;
    for (std::size_t idx : indices) {
        const float orig = probe.volume.data[idx];
        // Perturbed values round to float storage; the quotient must use the
        // actual stored endpoints, not the nominal 2*eps.
        const float hi = static_cast<float>(orig + eps);
        const float lo = static_cast<float>(orig - eps);
        probe.volume.data[idx] = hi;
        const double f_plus = forward_logit_f64(params, probe);
        probe.volume.data[idx] = lo;
        const double f_minus = forward_logit_f64(params, probe);
        probe.volume.data[idx] = orig;
        const double fd =
            (f_plus - f_minus) / (static_cast<double>(hi) - static_cast<double>(lo));
        const double denom = std::max({std::abs(fd), std::abs(grad[idx]), 1e-6});
        max_rel = std::max(max_rel, std::abs(fd - grad[idx]) / denom);
    }
    return max_rel;
}

}  // namespace iexplain
