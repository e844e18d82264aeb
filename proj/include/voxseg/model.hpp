#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxseg/error.hpp"
#include "voxseg/io.hpp"
#include "voxseg/nn_ops.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg::model {

struct NetworkConfig {
  int in_channels = 1;
  int num_classes = 2;
  int base_filters = 32;
  int resolution_steps = 4;
  float dropout_rate = 0.2f;

  bool operator==(const NetworkConfig&) const = default;

  void validate() const {
    if (in_channels < 1) throw ValidationError("in_channels must be >= 1, got " + std::to_string(in_channels));
    if (num_classes < 2) throw ValidationError("num_classes must be >= 2, got " + std::to_string(num_classes));
    if (base_filters < 1) throw ValidationError("base_filters must be >= 1, got " + std::to_string(base_filters));
    if (resolution_steps < 2) throw ValidationError("resolution_steps must be >= 2, got " + std::to_string(resolution_steps));
    if (!(dropout_rate >= 0.f && dropout_rate < 1.f))
      throw ValidationError("dropout_rate must be in [0, 1), got " + std::to_string(dropout_rate));
  }

  nlohmann::json to_json() const {
    return {{"in_channels", in_channels},
            {"num_classes", num_classes},
            {"base_filters", base_filters},
            {"resolution_steps", resolution_steps},
            {"dropout_rate", dropout_rate}};
  }

  static NetworkConfig from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.base_filters = j.at("base_filters").get<int>();
    c.resolution_steps = j.at("resolution_steps").get<int>();
    c.dropout_rate = j.at("dropout_rate").get<float>();
    return c;
  }
};

struct TensorRef {
  std::string path;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

struct ParameterCounts {
  std::size_t encoder = 0;
  std::size_t decoder = 0;
  std::size_t head = 0;

  std::size_t total() const { return encoder + decoder + head; }
  double encoder_fraction() const {
    const std::size_t body = encoder + decoder;
    return body == 0 ? 0.0 : static_cast<double>(encoder) / static_cast<double>(body);
  }
};

inline constexpr char kWeightMagic[8] = {'V', 'S', 'E', 'G', 'W', '0', '0', '1'};

// Residual encoder-decoder over 3D patches. Channels double at each of the
// resolution_steps encoder levels; downsampling concatenates a 2x2x2 max-pool
// with a stride-2 convolution, upsampling is a stride-2 transposed conv whose
// output is summed with the skip connection. All parameters live in one flat
// buffer so optimizers and gradient checks can treat the network as a vector.
template <typename T>
class Network {
 public:
  struct Workspace {
    struct Enc {
      Tensor4<T> z1, z2, zsum, out;
      std::vector<T> mask;
    };
    struct Dwn {
      Tensor4<T> zd, out;
      std::vector<std::int32_t> argmax;
    };
    struct Dec {
      Tensor4<T> zu, s, zsum, out;
    };

    Tensor4<T> input;
    std::vector<Enc> enc;
    std::vector<Dwn> down;
    std::vector<Dec> dec;
    Tensor4<T> zh, prob;

    Tensor4<T> a_tmp, sc_tmp, pool_tmp, ad_tmp;
    Tensor4<T> dzh, dzsum, ds, dzu, da1, dz1, dxin, dpool, dad, dzd;
    std::vector<Tensor4<T>> denc, ddec;
    std::vector<T> scratch, scratch2;
  };

  Network(const NetworkConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    build_layout();
    init_parameters(rng);
  }

  const NetworkConfig& config() const { return cfg_; }
  int input_channels() const { return cfg_.in_channels; }
  const std::vector<TensorRef>& manifest() const { return manifest_; }
  std::vector<T>& parameters() { return theta_; }
  const std::vector<T>& parameters() const { return theta_; }
  std::size_t parameter_count() const { return theta_.size(); }

  ParameterCounts parameter_counts() const {
    ParameterCounts pc;
    for (const TensorRef& r : manifest_) {
      if (r.path.rfind("encoder/", 0) == 0) pc.encoder += r.size;
      else if (r.path.rfind("decoder/", 0) == 0) pc.decoder += r.size;
      else pc.head += r.size;
    }
    return pc;
  }

  // Evaluation forward pass: dropout disabled, caller keeps no workspace.
  Tensor4<T> forward(const Tensor4<T>& input) const {
    Workspace ws;
    return run_forward(input, ws, nullptr);
  }

  // Evaluation forward pass reusing caller buffers across calls.
  const Tensor4<T>& forward(const Tensor4<T>& input, Workspace& ws) const {
    return run_forward(input, ws, nullptr);
  }

  // Training forward pass: spatial dropout active when dropout_rng is given.
  const Tensor4<T>& forward_train(const Tensor4<T>& input, Workspace& ws, Rng* dropout_rng) const {
    return run_forward(input, ws, dropout_rng);
  }

  // Accumulates d(loss)/d(theta) into grad given d(loss)/d(probabilities).
  // The workspace must hold the caches of the matching forward_train call.
  void backward(const Tensor4<T>& dprob, Workspace& ws, std::vector<T>& grad) const {
    if (grad.size() != theta_.size())
      throw ValidationError("gradient buffer size " + std::to_string(grad.size()) +
                            " does not match parameter count " + std::to_string(theta_.size()));
    if (dprob.shape() != ws.prob.shape())
      throw ValidationError("probability gradient shape does not match forward output");
    const int steps = cfg_.resolution_steps;

    nn::softmax_backward(ws.prob, dprob, ws.dzh);

    ws.ddec.resize(steps - 1);
    ws.denc.resize(steps);
    for (int l = 0; l < steps - 1; ++l) ensure_zero(ws.ddec[l], ws.dec[l].out.channels(), ws.dec[l].out.spatial());
    for (int l = 0; l < steps; ++l) ensure_zero(ws.denc[l], ws.enc[l].out.channels(), ws.enc[l].out.spatial());

    nn::conv_backward(ws.dec[0].out, th(head_.w), head_.co, 1, 1, 0, ws.dzh,
                      gp(grad, head_.w), gp(grad, head_.b), &ws.ddec[0], ws.scratch, ws.scratch2);

    for (int l = 0; l < steps - 1; ++l) {
      const DecLevel& dl = dec_[l];
      typename Workspace::Dec& dc = ws.dec[l];
      ensure_zero(ws.dzsum, dc.zsum.channels(), dc.zsum.spatial());
      nn::prelu_backward(dc.zsum, th(dl.pr.a), ws.ddec[l], ws.dzsum, gp(grad, dl.pr.a));
      ws.ds = ws.dzsum;
      nn::conv_backward(dc.s, th(dl.conv.w), dl.conv.co, 3, 1, 1, ws.dzsum,
                        gp(grad, dl.conv.w), gp(grad, dl.conv.b), &ws.ds, ws.scratch, ws.scratch2);
      nn::add_into(ws.denc[l], ws.ds);
      ensure_zero(ws.dzu, dc.zu.channels(), dc.zu.spatial());
      nn::prelu_backward(dc.zu, th(dl.up_pr.a), ws.ds, ws.dzu, gp(grad, dl.up_pr.a));
      const Tensor4<T>& a_in = (l == steps - 2) ? ws.enc[steps - 1].out : ws.dec[l + 1].out;
      Tensor4<T>& da_in = (l == steps - 2) ? ws.denc[steps - 1] : ws.ddec[l + 1];
      nn::tconv_backward(a_in, th(dl.up_w), dl.up_co, ws.dzu,
                         gp(grad, dl.up_w), gp(grad, dl.up_b), &da_in, ws.scratch);
    }

    for (int l = steps - 1; l >= 0; --l) {
      const EncLevel& e = enc_[l];
      typename Workspace::Enc& c = ws.enc[l];
      Tensor4<T>& dout = ws.denc[l];
      nn::channel_scale(dout, c.mask);
      ensure_zero(ws.dzsum, c.zsum.channels(), c.zsum.spatial());
      nn::prelu_backward(c.zsum, th(e.pr2.a), dout, ws.dzsum, gp(grad, e.pr2.a));
      nn::prelu_forward(c.z1, th(e.pr1.a), ws.a_tmp);
      ensure_zero(ws.da1, ws.a_tmp.channels(), ws.a_tmp.spatial());
      nn::conv_backward(ws.a_tmp, th(e.conv2.w), e.conv2.co, 3, 1, 1, ws.dzsum,
                        gp(grad, e.conv2.w), gp(grad, e.conv2.b), &ws.da1, ws.scratch, ws.scratch2);
      ensure_zero(ws.dz1, c.z1.channels(), c.z1.spatial());
      nn::prelu_backward(c.z1, th(e.pr1.a), ws.da1, ws.dz1, gp(grad, e.pr1.a));
      const Tensor4<T>& x_in = (l == 0) ? ws.input : ws.down[l - 1].out;
      ensure_zero(ws.dxin, x_in.channels(), x_in.spatial());
      nn::conv_backward(x_in, th(e.conv1.w), e.conv1.co, 3, 1, 1, ws.dz1,
                        gp(grad, e.conv1.w), gp(grad, e.conv1.b), &ws.dxin, ws.scratch, ws.scratch2);
      if (e.has_proj) {
        nn::conv_backward(x_in, th(e.proj.w), e.proj.co, 1, 1, 0, ws.dzsum,
                          gp(grad, e.proj.w), gp(grad, e.proj.b), &ws.dxin, ws.scratch, ws.scratch2);
      } else {
        nn::add_into(ws.dxin, ws.dzsum);
      }
      if (l > 0) {
        const Down& d = down_[l - 1];
        typename Workspace::Dwn& dcc = ws.down[l - 1];
        nn::split_channels(ws.dxin, ws.dpool, ws.dad, d.c_pass);
        nn::maxpool_backward(ws.dpool, dcc.argmax, ws.denc[l - 1]);
        ensure_zero(ws.dzd, dcc.zd.channels(), dcc.zd.spatial());
        nn::prelu_backward(dcc.zd, th(d.pr.a), ws.dad, ws.dzd, gp(grad, d.pr.a));
        nn::conv_backward(ws.enc[l - 1].out, th(d.conv.w), d.conv.co, 3, 2, 1, ws.dzd,
                          gp(grad, d.conv.w), gp(grad, d.conv.b), &ws.denc[l - 1], ws.scratch, ws.scratch2);
      }
    }
  }

  void save_weights(const std::string& path) const {
    nlohmann::json header;
    header["config"] = cfg_.to_json();
    header["dtype"] = "float32";
    header["byte_order"] = "little";
    nlohmann::json tensors = nlohmann::json::array();
    for (const TensorRef& r : manifest_) tensors.push_back({{"path", r.path}, {"shape", r.shape}});
    header["tensors"] = std::move(tensors);
    const std::string hs = header.dump();

    std::vector<unsigned char> bytes;
    bytes.reserve(8 + 8 + hs.size() + theta_.size() * 4);
    bytes.insert(bytes.end(), kWeightMagic, kWeightMagic + 8);
    const std::uint64_t hlen = hs.size();
    const unsigned char* hp = reinterpret_cast<const unsigned char*>(&hlen);
    bytes.insert(bytes.end(), hp, hp + 8);
    bytes.insert(bytes.end(), hs.begin(), hs.end());
    std::vector<float> payload(theta_.size());
    for (std::size_t i = 0; i < theta_.size(); ++i) payload[i] = static_cast<float>(theta_[i]);
    const unsigned char* pp = reinterpret_cast<const unsigned char*>(payload.data());
    bytes.insert(bytes.end(), pp, pp + payload.size() * 4);
    detail::write_file_bytes(path, bytes);
  }

  static Network load_weights(const std::string& path, const NetworkConfig* expected = nullptr) {
    const std::vector<unsigned char> bytes = detail::read_file_bytes(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kWeightMagic, 8) != 0)
      throw IoError("'" + path + "' is not a weight file (bad magic)");
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 8, 8);
    if (16 + hlen > bytes.size()) throw IoError("weight file '" + path + "' is truncated in the header");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("weight file '" + path + "' has an unreadable header: " + e.what());
    }
    NetworkConfig cfg;
    try {
      cfg = NetworkConfig::from_json(header.at("config"));
      if (header.at("dtype").get<std::string>() != "float32")
        throw IoError("weight file '" + path + "' has unsupported dtype");
      if (header.at("byte_order").get<std::string>() != "little")
        throw IoError("weight file '" + path + "' has unsupported byte order");
    } catch (const nlohmann::json::exception& e) {
      throw IoError("weight file '" + path + "' has an incomplete header: " + e.what());
    }
    if (expected && !(cfg == *expected))
      throw ValidationError("weight file '" + path + "' was trained with a different network configuration");

    Rng rng(0);
    Network net(cfg, rng);
    if (header.at("tensors").size() != net.manifest_.size())
      throw IoError("weight file '" + path + "' tensor list does not match the architecture");
    for (std::size_t i = 0; i < net.manifest_.size(); ++i) {
      const nlohmann::json& t = header["tensors"][i];
      const std::vector<int> shape = t.at("shape").get<std::vector<int>>();
      if (t.at("path").get<std::string>() != net.manifest_[i].path || shape != net.manifest_[i].shape)
        throw IoError("weight file '" + path + "' tensor '" + t.at("path").get<std::string>() +
                      "' does not match the architecture");
    }
    const std::size_t want = net.theta_.size() * 4;
    if (bytes.size() - 16 - hlen != want)
      throw IoError("weight file '" + path + "' payload has " + std::to_string(bytes.size() - 16 - hlen) +
                    " bytes, expected " + std::to_string(want));
    std::vector<float> payload(net.theta_.size());
    std::memcpy(payload.data(), bytes.data() + 16 + hlen, want);
    for (std::size_t i = 0; i < payload.size(); ++i) net.theta_[i] = static_cast<T>(payload[i]);
    return net;
  }

 private:
  struct Conv {
    int ci = 0, co = 0;
    std::size_t w = 0, b = 0;
  };
  struct PRelu {
    int c = 0;
    std::size_t a = 0;
  };
  struct EncLevel {
    Conv conv1, conv2;
    PRelu pr1, pr2;
    bool has_proj = false;
    Conv proj;
  };
  struct Down {
    Conv conv;
    PRelu pr;
    int c_pass = 0;
  };
  struct DecLevel {
    std::size_t up_w = 0, up_b = 0;
    int up_ci = 0, up_co = 0;
    PRelu up_pr;
    Conv conv;
    PRelu pr;
  };

  NetworkConfig cfg_;
  std::vector<EncLevel> enc_;
  std::vector<Down> down_;
  std::vector<DecLevel> dec_;
  Conv head_;
  std::vector<TensorRef> manifest_;
  std::vector<T> theta_;
  std::size_t theta_size_ = 0;

  const T* th(std::size_t off) const { return theta_.data() + off; }
  static T* gp(std::vector<T>& grad, std::size_t off) { return grad.data() + off; }

  int level_channels(int l) const { return cfg_.base_filters << l; }

  std::size_t alloc(std::string path, std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    manifest_.push_back({std::move(path), std::move(shape), theta_size_, n});
    theta_size_ += n;
    return manifest_.back().offset;
  }

  void alloc_conv(Conv& c, const std::string& prefix, int co, int ci, int k) {
    c.ci = ci;
    c.co = co;
    c.w = alloc(prefix + "/weight", {co, ci, k, k, k});
    c.b = alloc(prefix + "/bias", {co});
  }

  void alloc_prelu(PRelu& p, const std::string& path, int c) {
    p.c = c;
    p.a = alloc(path + "/slope", {c});
  }

  void build_layout() {
    const int steps = cfg_.resolution_steps;
    enc_.resize(steps);
    down_.resize(steps - 1);
    dec_.resize(steps - 1);
    for (int l = 0; l < steps; ++l) {
      const int ci = (l == 0) ? cfg_.in_channels : 2 * level_channels(l - 1);
      const int co = level_channels(l);
      const std::string base = "encoder/level" + std::to_string(l);
      EncLevel& e = enc_[l];
      alloc_conv(e.conv1, base + "/conv1", co, ci, 3);
      alloc_prelu(e.pr1, base + "/prelu1", co);
      alloc_conv(e.conv2, base + "/conv2", co, co, 3);
      alloc_prelu(e.pr2, base + "/prelu2", co);
      e.has_proj = (ci != co);
      if (e.has_proj) alloc_conv(e.proj, base + "/proj", co, ci, 1);
      if (l < steps - 1) {
        const std::string dbase = "encoder/down" + std::to_string(l);
        Down& d = down_[l];
        d.c_pass = co;
        alloc_conv(d.conv, dbase + "/conv", co, co, 3);
        alloc_prelu(d.pr, dbase + "/prelu", co);
      }
    }
    for (int l = steps - 2; l >= 0; --l) {
      const std::string base = "decoder/level" + std::to_string(l);
      DecLevel& dl = dec_[l];
      dl.up_ci = (l == steps - 2) ? level_channels(steps - 1) : level_channels(l + 1);
      dl.up_co = level_channels(l);
      dl.up_w = alloc(base + "/upconv/weight", {dl.up_ci, dl.up_co, 3, 3, 3});
      dl.up_b = alloc(base + "/upconv/bias", {dl.up_co});
      alloc_prelu(dl.up_pr, base + "/up_prelu", dl.up_co);
      alloc_conv(dl.conv, base + "/conv", dl.up_co, dl.up_co, 3);
      alloc_prelu(dl.pr, base + "/prelu", dl.up_co);
    }
    alloc_conv(head_, "head/conv", cfg_.num_classes, level_channels(0), 1);
    theta_.assign(theta_size_, T(0));
  }

  // He-normal fan-in init for convolution weights, zero biases, slopes 0.25.
  // Draw order follows the manifest so equal seeds give equal networks.
  void init_parameters(Rng& rng) {
    for (const TensorRef& r : manifest_) {
      T* p = theta_.data() + r.offset;
      if (r.path.size() >= 7 && r.path.compare(r.path.size() - 7, 7, "/weight") == 0) {
        std::size_t fan_in = 1;
        for (std::size_t d = 1; d < r.shape.size(); ++d) fan_in *= static_cast<std::size_t>(r.shape[d]);
        if (r.path.find("/upconv/") != std::string::npos)
          fan_in = static_cast<std::size_t>(r.shape[0]) * 27;
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (std::size_t i = 0; i < r.size; ++i) p[i] = static_cast<T>(rng.normal(0.0, sd));
      } else if (r.path.size() >= 6 && r.path.compare(r.path.size() - 6, 6, "/slope") == 0) {
        for (std::size_t i = 0; i < r.size; ++i) p[i] = T(0.25);
      }
    }
  }

  void check_input(const Tensor4<T>& x) const {
    if (x.channels() != cfg_.in_channels)
      throw ValidationError("input has " + std::to_string(x.channels()) + " channels, network expects " +
                            std::to_string(cfg_.in_channels));
    const int factor = 1 << (cfg_.resolution_steps - 1);
    for (int a = 0; a < 3; ++a) {
      if (x.spatial()[a] % factor != 0 || x.spatial()[a] < factor)
        throw ValidationError("input spatial dim " + std::to_string(a) + " (" + std::to_string(x.spatial()[a]) +
                              ") must be a positive multiple of " + std::to_string(factor));
    }
  }

  static void ensure_zero(Tensor4<T>& t, int c, const Index3& sp) {
    if (t.channels() != c || t.spatial() != sp) t = Tensor4<T>(c, sp);
    else t.fill(T(0));
  }

  const Tensor4<T>& run_forward(const Tensor4<T>& x, Workspace& ws, Rng* dropout_rng) const {
    check_input(x);
    const int steps = cfg_.resolution_steps;
    ws.enc.resize(steps);
    ws.down.resize(steps - 1);
    ws.dec.resize(steps - 1);
    ws.input = x;

    const Tensor4<T>* cur = &ws.input;
    for (int l = 0; l < steps; ++l) {
      const EncLevel& e = enc_[l];
      typename Workspace::Enc& c = ws.enc[l];
      nn::conv_forward(*cur, th(e.conv1.w), th(e.conv1.b), e.conv1.co, 3, 1, 1, c.z1, ws.scratch);
      nn::prelu_forward(c.z1, th(e.pr1.a), ws.a_tmp);
      nn::conv_forward(ws.a_tmp, th(e.conv2.w), th(e.conv2.b), e.conv2.co, 3, 1, 1, c.z2, ws.scratch);
      c.zsum = c.z2;
      if (e.has_proj) {
        nn::conv_forward(*cur, th(e.proj.w), th(e.proj.b), e.proj.co, 1, 1, 0, ws.sc_tmp, ws.scratch);
        nn::add_into(c.zsum, ws.sc_tmp);
      } else {
        nn::add_into(c.zsum, *cur);
      }
      nn::prelu_forward(c.zsum, th(e.pr2.a), c.out);
      c.mask.assign(static_cast<std::size_t>(c.out.channels()), T(1));
      if (dropout_rng && cfg_.dropout_rate > 0.f) {
        const T keep_scale = T(1) / (T(1) - static_cast<T>(cfg_.dropout_rate));
        for (T& m : c.mask) m = (dropout_rng->uniform_real() < cfg_.dropout_rate) ? T(0) : keep_scale;
        nn::channel_scale(c.out, c.mask);
      }
      if (l < steps - 1) {
        const Down& d = down_[l];
        typename Workspace::Dwn& dc = ws.down[l];
        nn::maxpool_forward(c.out, ws.pool_tmp, dc.argmax);
        nn::conv_forward(c.out, th(d.conv.w), th(d.conv.b), d.conv.co, 3, 2, 1, dc.zd, ws.scratch);
        nn::prelu_forward(dc.zd, th(d.pr.a), ws.ad_tmp);
        nn::concat_channels(ws.pool_tmp, ws.ad_tmp, dc.out);
        cur = &dc.out;
      }
    }

    const Tensor4<T>* a = &ws.enc[steps - 1].out;
    for (int l = steps - 2; l >= 0; --l) {
      const DecLevel& dl = dec_[l];
      typename Workspace::Dec& dc = ws.dec[l];
      nn::tconv_forward(*a, th(dl.up_w), th(dl.up_b), dl.up_co, dc.zu, ws.scratch);
      nn::prelu_forward(dc.zu, th(dl.up_pr.a), dc.s);
      nn::add_into(dc.s, ws.enc[l].out);
      nn::conv_forward(dc.s, th(dl.conv.w), th(dl.conv.b), dl.conv.co, 3, 1, 1, dc.zsum, ws.scratch);
      nn::add_into(dc.zsum, dc.s);
      nn::prelu_forward(dc.zsum, th(dl.pr.a), dc.out);
      a = &dc.out;
    }

    nn::conv_forward(*a, th(head_.w), th(head_.b), head_.co, 1, 1, 0, ws.zh, ws.scratch);
    nn::softmax_channels(ws.zh, ws.prob);
    return ws.prob;
  }
};

template <typename T>
Network<T> build_network(const NetworkConfig& cfg, Rng& rng) {
  return Network<T>(cfg, rng);
}

template <typename T>
std::vector<Tensor4<T>> forward(const Network<T>& net, const std::vector<Tensor4<T>>& batch) {
  typename Network<T>::Workspace ws;
  std::vector<Tensor4<T>> out;
  out.reserve(batch.size());
  for (const Tensor4<T>& x : batch) out.push_back(net.forward(x, ws));
  return out;
}

}  // namespace voxseg::model
