#pragma once

// Runs a model over prompts and writes the final-token site activations and
// output distributions as a DGC1 trace.

#include <string>
#include <vector>

#include "dgc/arith_data.hpp"
#include "dgc/parallel.hpp"
#include "dgc/trace_store.hpp"
#include "dgc/transformer.hpp"

namespace dgc {

struct CaptureOptions {
  Site site = Site::mlp_out;
  std::string model_id = "toy";
  std::string dataset;
  std::size_t chunk = 256;
};

template <class S>
TraceRecord capture_record(const Model<S>& model, const ArithmeticPrompt& p, Site site) {
  const ForwardRecord fr = forward_record(model, model.tokenizer.encode(p.render()), true);
  std::vector<float> act;
  act.reserve(static_cast<std::size_t>(model.config.n_layers) * fr.site_width(site));
  for (int l = 0; l < model.config.n_layers; ++l) {
    const auto s = fr.site(site, l);
    act.insert(act.end(), s.begin(), s.end());
  }
  return make_trace_record(p, std::move(act), fr.probs);
}

template <class S>
std::size_t capture_trace(const Model<S>& model, const std::vector<ArithmeticPrompt>& prompts,
                          const std::string& path, const CaptureOptions& o = {}) {
  TraceHeader h;
  h.prob_mode = model.vocab_size() > kDenseVocabLimit ? ProbMode::sparse : ProbMode::dense;
  h.n_layers = static_cast<std::uint32_t>(model.config.n_layers);
  h.d_neurons = static_cast<std::uint32_t>(o.site == Site::mlp_hidden ? model.config.d_mlp
                                                                      : model.config.d_model);
  h.vocab_size = static_cast<std::uint32_t>(model.vocab_size());
  h.metadata["model_id"] = o.model_id;
  h.metadata["site"] = to_string(o.site);
  h.metadata["tokenizer"] = to_string(model.config.tokenizer);
  if (!o.dataset.empty()) h.metadata["dataset"] = o.dataset;
  if (!prompts.empty()) h.metadata["operator"] = to_string(prompts.front().op);
  TraceWriter w(path, h);
  std::vector<TraceRecord> buf;
  for (std::size_t lo = 0; lo < prompts.size(); lo += o.chunk) {
    const std::size_t hi = std::min(prompts.size(), lo + o.chunk);
    buf.assign(hi - lo, TraceRecord{});
    parallel_for(hi - lo, [&](std::size_t i) {
      buf[i] = capture_record(model, prompts[lo + i], o.site);
      if (h.prob_mode == ProbMode::sparse) {
        // keep the top of the distribution only
        auto& r = buf[i];
        std::vector<std::pair<std::uint32_t, float>> sp;
        for (std::uint32_t t = 0; t < r.dense_probs.size(); ++t)
          if (r.dense_probs[t] >= 1e-6f) sp.emplace_back(t, r.dense_probs[t]);
        r.sparse_probs = std::move(sp);
        r.dense_probs.clear();
      }
    });
    for (const auto& r : buf) w.write(r);
  }
  w.close();
  return w.count();
}

}  // namespace dgc
