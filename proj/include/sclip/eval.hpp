#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "sclip/core_math.hpp"
#include "sclip/error.hpp"
#include "sclip/matrix.hpp"

namespace sclip {

/// Top-1 accuracy (%) of nearest-class-embedding classification; similarity
/// ties resolve to the lowest class index.
inline double zero_shot_accuracy(const EmbeddingMatrix& images, const EmbeddingMatrix& classes,
                                 const std::vector<std::size_t>& labels) {
  if (images.rows() != labels.size()) {
    throw Error(Errc::dim_mismatch, "zero_shot_accuracy: one label per image required");
  }
  for (std::size_t label : labels) {
    if (label >= classes.rows()) {
      throw Error(Errc::dim_mismatch, "zero_shot_accuracy: label out of range");
    }
  }
  const Matrix sims = cosine_matrix(images, classes);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < sims.rows(); ++i) {
    hits += (argmax_index(sims.row(i)) == labels[i]);
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(images.rows());
}

/// R@K (%): fraction of queries whose correct gallery item ranks in the top
/// k under the total order (similarity descending, index ascending).
inline double retrieval_recall(const EmbeddingMatrix& queries, const EmbeddingMatrix& gallery,
                               const std::vector<std::size_t>& correct, int k) {
  if (k < 1) throw Error(Errc::config_invalid, "retrieval_recall: k must be >= 1");
  if (static_cast<std::size_t>(k) > gallery.rows()) {
    throw Error(Errc::k_too_large, "retrieval_recall: k " + std::to_string(k) +
                                       " exceeds gallery size " + std::to_string(gallery.rows()));
  }
  if (queries.rows() != correct.size()) {
    throw Error(Errc::dim_mismatch, "retrieval_recall: one correct index per query required");
  }
  const Matrix sims = cosine_matrix(queries, gallery);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < sims.rows(); ++i) {
    const std::size_t c = correct[i];
    if (c >= gallery.rows()) {
      throw Error(Errc::dim_mismatch, "retrieval_recall: correct index out of range");
    }
    const double target_sim = sims(i, c);
    std::size_t rank = 0;  // number of items strictly ahead of the correct one
    for (std::size_t j = 0; j < gallery.rows(); ++j) {
      if (sims(i, j) > target_sim || (sims(i, j) == target_sim && j < c)) ++rank;
    }
    hits += (rank < static_cast<std::size_t>(k));
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(queries.rows());
}

struct RetrievalEntry {
  std::string direction;  // "img2txt" or "txt2img"
  int k = 1;
  double recall = 0.0;
};

struct EvalReport {
  double zero_shot_top1 = 0.0;
  std::vector<RetrievalEntry> retrieval;
  std::size_t n_classification_queries = 0;
  std::size_t n_retrieval_queries = 0;
};

/// Full protocol: zero-shot classification of eval images against class
/// prompts plus bidirectional retrieval over the eval pairs.
inline EvalReport evaluate_embeddings(const EmbeddingMatrix& eval_images,
                                      const EmbeddingMatrix& eval_texts,
                                      const EmbeddingMatrix& class_embeddings,
                                      const std::vector<std::size_t>& labels,
                                      const std::vector<int>& retrieval_ks) {
  EvalReport report;
  report.zero_shot_top1 = zero_shot_accuracy(eval_images, class_embeddings, labels);
  report.n_classification_queries = eval_images.rows();
  report.n_retrieval_queries = eval_images.rows();
  std::vector<std::size_t> identity(eval_images.rows());
  for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = i;
  for (int k : retrieval_ks) {
    report.retrieval.push_back(
        {"img2txt", k, retrieval_recall(eval_images, eval_texts, identity, k)});
    report.retrieval.push_back(
        {"txt2img", k, retrieval_recall(eval_texts, eval_images, identity, k)});
  }
  return report;
}

}  // namespace sclip
