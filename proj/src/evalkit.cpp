#include "fungi/evalkit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "fungi/parallel.hpp"
#include "fungi/rng.hpp"

namespace fungi {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const MatD> as_mat(const Tensor<double>& t) { return {t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

std::string fmt(double v) {
    char buf[64];
    const double a = std::fabs(v);
    std::snprintf(buf, sizeof buf, a != 0 && a < 1e-3 ? "%.6g" : "%.6f", v);
    return buf;
}

}  // namespace

KnnIndex::KnnIndex(Tensor<double> f, std::vector<Label> l, std::size_t k_)
    : features(std::move(f)), labels(std::move(l)), k(k_) {
    if (labels.empty()) throw DataError("kNN index is empty");
    if (features.rank() != 2 || features.rows() != labels.size()) throw ShapeError("kNN features/labels disagree");
    if (k == 0) throw ConfigError("kNN k must be >= 1");
}

Label knn_classify(const KnnIndex& index, std::span<const double> query) {
    const std::size_t n = index.size();
    if (n == 0) throw DataError("kNN index is empty");
    if (index.k > n) throw ConfigError("kNN k = " + std::to_string(index.k) + " exceeds index size " + std::to_string(n));
    if (query.size() != index.features.cols()) throw ShapeError("kNN query dimension");
    std::vector<std::pair<double, std::size_t>> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = {sq_dist(query, index.features.row(i)), i};
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(index.k), d.end());

    std::map<Label, std::pair<std::size_t, double>> votes;  // count, sum of inverse distance
    for (std::size_t j = 0; j < index.k; ++j) {
        auto& v = votes[index.labels[d[j].second]];
        ++v.first;
        v.second += 1.0 / std::sqrt(d[j].first);  // +inf on an exact match
    }
    Label best = votes.begin()->first;
    std::pair<std::size_t, double> best_v = votes.begin()->second;
    for (const auto& [label, v] : votes) {
        // map iterates labels ascending, so strict comparisons keep the smaller label on ties
        if (v.first > best_v.first || (v.first == best_v.first && v.second > best_v.second)) {
            best = label;
            best_v = v;
        }
    }
    return best;
}

std::vector<Label> knn_classify(const KnnIndex& index, const Tensor<double>& queries, std::size_t jobs) {
    if (queries.rank() != 2) throw ShapeError("kNN queries must be 2-D");
    std::vector<Label> out(queries.rows());
    parallel_for(queries.rows(), jobs, [&](std::size_t i) { out[i] = knn_classify(index, queries.row(i)); });
    return out;
}

std::vector<std::size_t> few_shot_subset(const std::vector<Label>& labels, std::size_t shots, std::uint64_t seed) {
    std::map<Label, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    std::vector<std::size_t> out;
    for (auto& [label, idx] : by_class) {
        if (idx.size() < shots) {
            throw DataError("class " + std::to_string(label) + " has " + std::to_string(idx.size()) + " samples, need " +
                            std::to_string(shots));
        }
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(static_cast<std::int64_t>(label))));
        std::shuffle(idx.begin(), idx.end(), rng);
        out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shots));
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::map<Label, double> per_class_accuracy(const std::vector<Label>& preds, const std::vector<Label>& labels) {
    if (preds.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
    if (labels.empty()) throw DataError("accuracy of an empty set");
    std::map<Label, std::pair<std::size_t, std::size_t>> tally;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& t = tally[labels[i]];
        ++t.second;
        if (preds[i] == labels[i]) ++t.first;
    }
    std::map<Label, double> out;
    for (const auto& [label, t] : tally) out[label] = static_cast<double>(t.first) / static_cast<double>(t.second);
    return out;
}

double accuracy(const std::vector<Label>& preds, const std::vector<Label>& labels, AccuracyMode mode) {
    if (preds.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
    if (labels.empty()) throw DataError("accuracy of an empty set");
    if (mode == AccuracyMode::top1) {
        std::size_t hit = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) hit += preds[i] == labels[i];
        return static_cast<double>(hit) / static_cast<double>(labels.size());
    }
    const auto per = per_class_accuracy(preds, labels);
    double s = 0;
    for (const auto& kv : per) s += kv.second;
    return s / static_cast<double>(per.size());
}

std::vector<ClassDelta> per_class_delta(const std::map<Label, double>& a, const std::map<Label, double>& b) {
    if (a.size() != b.size()) throw DataError("per-class reports cover different class sets");
    std::vector<ClassDelta> out;
    for (const auto& [label, va] : a) {
        auto it = b.find(label);
        if (it == b.end()) throw DataError("class " + std::to_string(label) + " missing from second report");
        out.push_back({label, va, it->second, va - it->second});
    }
    return out;
}

std::string deltas_csv(const std::vector<ClassDelta>& deltas) {
    std::ostringstream os;
    os << "class,acc_a,acc_b,delta\n";
    for (const auto& d : deltas) os << d.label << ',' << fmt(d.a) << ',' << fmt(d.b) << ',' << fmt(d.delta) << '\n';
    return os.str();
}

double linear_cka(const Tensor<double>& x, const Tensor<double>& y) {
    if (x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows()) throw ShapeError("CKA inputs need the same row count");
    if (x.rows() < 2) throw DataError("CKA needs at least two samples");
    const Eigen::MatrixXd xc = as_mat(x).rowwise() - as_mat(x).colwise().mean();
    const Eigen::MatrixXd yc = as_mat(y).rowwise() - as_mat(y).colwise().mean();
    const double nx = (xc.transpose() * xc).norm();
    const double ny = (yc.transpose() * yc).norm();
    if (!(nx > 0) || !(ny > 0)) throw NumericError("CKA input has zero variance");
    const double cross = (yc.transpose() * xc).squaredNorm();
    return cross / (nx * ny);
}

KMeansResult kmeans(const Tensor<double>& x, std::size_t clusters, std::uint64_t seed, const KMeansParams& params) {
    if (x.rank() != 2) throw ShapeError("kmeans input must be 2-D");
    const std::size_t n = x.rows(), d = x.cols();
    if (clusters == 0 || clusters > n) throw DataError("kmeans needs 1 <= clusters <= samples");
    Rng rng(seed);
    KMeansResult r;
    r.centroids = Tensor<double>(Shape{clusters, d});

    // k-means++
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    std::size_t first = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(n) - 1));
    std::copy(x.row(first).begin(), x.row(first).end(), r.centroids.row(0).begin());
    for (std::size_t c = 1; c < clusters; ++c) {
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            best[i] = std::min(best[i], sq_dist(x.row(i), r.centroids.row(c - 1)));
            total += best[i];
        }
        std::size_t pick = n - 1;
        if (total > 0) {
            double u = uniform01(rng) * total;
            for (std::size_t i = 0; i < n; ++i) {
                u -= best[i];
                if (u < 0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(n) - 1));
        }
        std::copy(x.row(pick).begin(), x.row(pick).end(), r.centroids.row(c).begin());
    }

    r.assignments.assign(n, 0);
    std::vector<double> dist(n);
    for (r.iterations = 0; r.iterations < params.max_iter;) {
        for (std::size_t i = 0; i < n; ++i) {
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < clusters; ++c) {
                const double dd = sq_dist(x.row(i), r.centroids.row(c));
                if (dd < bd) {
                    bd = dd;
                    r.assignments[i] = c;
                }
            }
            dist[i] = bd;
        }
        std::vector<std::size_t> count(clusters, 0);
        for (auto a : r.assignments) ++count[a];
        for (std::size_t c = 0; c < clusters; ++c) {
            if (count[c] > 0) continue;
            // empty cluster: take the point farthest from its own centroid among clusters that can spare one
            std::size_t far = n;
            for (std::size_t i = 0; i < n; ++i) {
                if (count[r.assignments[i]] > 1 && (far == n || dist[i] > dist[far])) far = i;
            }
            if (far == n) throw NumericError("kmeans cannot refill an empty cluster");
            --count[r.assignments[far]];
            r.assignments[far] = c;
            count[c] = 1;
            dist[far] = 0;
            ++r.reseeded;
        }
        Tensor<double> next(Shape{clusters, d});
        for (std::size_t i = 0; i < n; ++i) {
            auto row = next.row(r.assignments[i]);
            for (std::size_t j = 0; j < d; ++j) row[j] += x.at(i, j);
        }
        double shift = 0;
        for (std::size_t c = 0; c < clusters; ++c) {
            for (std::size_t j = 0; j < d; ++j) next.at(c, j) /= static_cast<double>(count[c]);
            shift = std::max(shift, std::sqrt(sq_dist(next.row(c), r.centroids.row(c))));
        }
        r.centroids = std::move(next);
        ++r.iterations;
        double inertia = 0;
        for (std::size_t i = 0; i < n; ++i) inertia += sq_dist(x.row(i), r.centroids.row(r.assignments[i]));
        r.inertia.push_back(inertia);
        if (shift < params.tol) break;
    }
    return r;
}

std::vector<std::size_t> hungarian(const Tensor<double>& cost) {
    if (cost.rank() != 2 || cost.dim(0) != cost.dim(1)) throw ShapeError("hungarian needs a square cost matrix");
    const std::size_t n = cost.dim(0);
    if (n == 0) return {};
    const double inf = std::numeric_limits<double>::infinity();
    // Potentials formulation, 1-based with a virtual column 0.
    std::vector<double> u(n + 1, 0), v(n + 1, 0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<std::size_t> result(n);
    for (std::size_t j = 1; j <= n; ++j) result[p[j] - 1] = j - 1;
    return result;
}

double cluster_overlap(const std::vector<std::size_t>& assignments, const std::vector<Label>& labels) {
    if (assignments.size() != labels.size()) throw ShapeError("assignments and labels differ in length");
    if (labels.empty()) throw DataError("cluster overlap of an empty set");
    std::map<Label, std::size_t> class_idx;
    for (auto l : labels) class_idx.emplace(l, 0);
    std::size_t k = 0;
    for (auto& kv : class_idx) kv.second = k++;
    const std::size_t clusters = *std::max_element(assignments.begin(), assignments.end()) + 1;
    const std::size_t n = std::max(clusters, class_idx.size());
    Tensor<double> cost(Shape{n, n});
    for (std::size_t i = 0; i < labels.size(); ++i) cost.at(assignments[i], class_idx[labels[i]]) -= 1.0;
    const auto match = hungarian(cost);
    double matched = 0;
    for (std::size_t r = 0; r < n; ++r) matched -= cost.at(r, match[r]);
    return matched / static_cast<double>(labels.size());
}

// ---- logistic probe ----

namespace {

// Row-wise softmax of x W^T + b.
Eigen::MatrixXd softmax_scores(const LogisticModel& m, const Tensor<double>& x) {
    Eigen::MatrixXd s = as_mat(x) * as_mat(m.weight).transpose();
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        for (Eigen::Index c = 0; c < s.cols(); ++c) s(i, c) += m.bias[static_cast<std::size_t>(c)];
        const double mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
    }
    return s;
}

}  // namespace

Tensor<double> LogisticModel::predict_proba(const Tensor<double>& x) const {
    if (x.rank() != 2 || x.cols() != weight.cols()) throw ShapeError("probe input dimension");
    const Eigen::MatrixXd p = softmax_scores(*this, x);
    Tensor<double> out(Shape{x.rows(), classes.size()});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t c = 0; c < classes.size(); ++c) out.at(i, c) = p(Eigen::Index(i), Eigen::Index(c));
    }
    return out;
}

std::vector<Label> LogisticModel::predict(const Tensor<double>& x) const {
    const Tensor<double> p = predict_proba(x);
    std::vector<Label> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto row = p.row(i);
        out[i] = classes[static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())];
    }
    return out;
}

double probe_objective(const LogisticModel& model, const Tensor<double>& x, const std::vector<std::size_t>& y,
                       double lambda, Tensor<double>* grad_w, std::vector<double>* grad_b) {
    const std::size_t n = x.rows(), c = model.classes.size();
    if (y.size() != n) throw ShapeError("probe targets length");
    Eigen::MatrixXd s = as_mat(x) * as_mat(model.weight).transpose();
    double loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto ii = Eigen::Index(i);
        for (std::size_t k = 0; k < c; ++k) s(ii, Eigen::Index(k)) += model.bias[k];
        const double mx = s.row(ii).maxCoeff();
        const double lse = mx + std::log((s.row(ii).array() - mx).exp().sum());
        loss += lse - s(ii, Eigen::Index(y[i]));
        s.row(ii) = (s.row(ii).array() - lse).exp();  // probabilities
        s(ii, Eigen::Index(y[i])) -= 1.0;              // dL/dscore
    }
    loss /= static_cast<double>(n);
    loss += 0.5 * lambda * as_mat(model.weight).squaredNorm();
    if (grad_w) {
        const Eigen::MatrixXd gw = s.transpose() * as_mat(x) / static_cast<double>(n) + lambda * as_mat(model.weight);
        *grad_w = Tensor<double>(Shape{c, x.cols()});
        for (std::size_t k = 0; k < c; ++k) {
            for (std::size_t j = 0; j < x.cols(); ++j) grad_w->at(k, j) = gw(Eigen::Index(k), Eigen::Index(j));
        }
    }
    if (grad_b) {
        grad_b->assign(c, 0.0);
        for (std::size_t k = 0; k < c; ++k) (*grad_b)[k] = s.col(Eigen::Index(k)).sum() / static_cast<double>(n);
    }
    if (!std::isfinite(loss)) throw NumericError("probe objective is not finite");
    return loss;
}

LogisticModel fit_logistic(const Tensor<double>& x, const std::vector<Label>& labels, double lambda,
                           std::size_t max_epochs) {
    if (x.rank() != 2 || x.rows() != labels.size()) throw ShapeError("probe features/labels disagree");
    LogisticModel m;
    const std::set<Label> uniq(labels.begin(), labels.end());
    m.classes.assign(uniq.begin(), uniq.end());
    if (m.classes.size() < 2) throw DataError("probe training set has a single class");
    const std::size_t c = m.classes.size(), d = x.cols();
    std::vector<std::size_t> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        y[i] = static_cast<std::size_t>(std::lower_bound(m.classes.begin(), m.classes.end(), labels[i]) - m.classes.begin());
    }
    m.weight = Tensor<double>(Shape{c, d});
    m.bias.assign(c, 0.0);

    Tensor<double> gw;
    std::vector<double> gb;
    double f = probe_objective(m, x, y, lambda, &gw, &gb);
    double step = 1.0;
    for (std::size_t epoch = 0; epoch < max_epochs; ++epoch) {
        double g2 = 0;
        for (double v : gw.values()) g2 += v * v;
        for (double v : gb) g2 += v * v;
        if (g2 < 1e-20) break;
        step *= 2.0;
        LogisticModel trial = m;
        double ft = 0;
        for (int tries = 0;; ++tries) {
            for (std::size_t i = 0; i < m.weight.numel(); ++i) trial.weight[i] = m.weight[i] - step * gw[i];
            for (std::size_t k = 0; k < c; ++k) trial.bias[k] = m.bias[k] - step * gb[k];
            ft = probe_objective(trial, x, y, lambda);
            if (ft <= f - 0.5 * step * g2) break;
            step *= 0.5;
            if (tries > 60) return m;  // no descent possible at double precision
        }
        m = std::move(trial);
        f = probe_objective(m, x, y, lambda, &gw, &gb);
    }
    return m;
}

std::vector<double> lambda_grid(const ProbeParams& p) {
    if (p.lambda_count == 0) throw ConfigError("probe lambda grid is empty");
    if (p.lambda_count == 1) return {p.lambda_min};
    std::vector<double> out(p.lambda_count);
    for (std::size_t i = 0; i < p.lambda_count; ++i) {
        out[i] = p.lambda_min + (p.lambda_max - p.lambda_min) * static_cast<double>(i) / static_cast<double>(p.lambda_count - 1);
    }
    return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const std::vector<Label>& labels,
                                                                               double val_fraction, std::uint64_t seed) {
    if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("validation fraction must be in (0, 1)");
    std::map<Label, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    std::vector<std::size_t> train, val;
    for (auto& [label, idx] : by_class) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(static_cast<std::int64_t>(label))));
        std::shuffle(idx.begin(), idx.end(), rng);
        std::size_t nv = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(idx.size())));
        if (nv == 0 && idx.size() >= 2) nv = 1;
        val.insert(val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nv));
        train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(nv), idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    return {train, val};
}

namespace {

Tensor<double> take_rows(const Tensor<double>& x, const std::vector<std::size_t>& idx) {
    Tensor<double> out(Shape{idx.size(), x.cols()});
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy(x.row(idx[i]).begin(), x.row(idx[i]).end(), out.row(i).begin());
    return out;
}

std::vector<Label> take(const std::vector<Label>& v, const std::vector<std::size_t>& idx) {
    std::vector<Label> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(v[i]);
    return out;
}

}  // namespace

ProbeResult logistic_probe(const Tensor<double>& train_x, const std::vector<Label>& train_y,
                           const Tensor<double>& test_x, const std::vector<Label>& test_y, const ProbeParams& params) {
    ProbeResult r;
    r.lambdas = lambda_grid(params);
    const auto [tr, va] = stratified_split(train_y, params.val_fraction, params.seed);
    if (va.empty()) throw DataError("probe validation split is empty");
    const Tensor<double> xtr = take_rows(train_x, tr), xva = take_rows(train_x, va);
    const std::vector<Label> ytr = take(train_y, tr), yva = take(train_y, va);
    double best = -1;
    for (double lambda : r.lambdas) {
        const LogisticModel m = fit_logistic(xtr, ytr, lambda, params.max_epochs);
        const double acc = accuracy(m.predict(xva), yva);
        r.val_accuracy.push_back(acc);
        if (acc > best) {
            best = acc;
            r.best_lambda = lambda;
        }
    }
    const LogisticModel final_model = fit_logistic(train_x, train_y, r.best_lambda, params.max_epochs);
    r.train_accuracy = accuracy(final_model.predict(train_x), train_y);
    r.test_accuracy = accuracy(final_model.predict(test_x), test_y);
    return r;
}

double average_precision(std::span<const double> scores, const std::vector<std::size_t>& relevant) {
    if (scores.empty()) throw DataError("empty gallery");
    if (relevant.empty()) throw DataError("query has no relevant items");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<char> rel(scores.size(), 0);
    for (auto r : relevant) {
        if (r >= scores.size()) throw DataError("relevant id outside the gallery");
        rel[r] = 1;
    }
    const std::size_t total = static_cast<std::size_t>(std::count(rel.begin(), rel.end(), 1));
    double ap = 0;
    std::size_t hits = 0;
    for (std::size_t rank = 0; rank < order.size() && hits < total; ++rank) {
        if (rel[order[rank]]) {
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
        }
    }
    return ap / static_cast<double>(total);
}

RetrievalResult retrieval_map(const Tensor<double>& queries, const Tensor<double>& gallery,
                              const std::vector<std::vector<std::size_t>>& relevance) {
    if (gallery.empty()) throw DataError("empty gallery");
    if (queries.rank() != 2 || gallery.rank() != 2 || queries.cols() != gallery.cols()) {
        throw ShapeError("retrieval query/gallery dimensions");
    }
    if (relevance.size() != queries.rows()) throw ShapeError("one relevance set per query required");
    std::vector<double> gnorm(gallery.rows());
    for (std::size_t j = 0; j < gallery.rows(); ++j) gnorm[j] = l2_norm(gallery.row(j));
    RetrievalResult r;
    double sum = 0;
    std::vector<double> scores(gallery.rows());
    for (std::size_t i = 0; i < queries.rows(); ++i) {
        if (relevance[i].empty()) {
            ++r.skipped;
            continue;
        }
        const double qn = l2_norm(queries.row(i));
        for (std::size_t j = 0; j < gallery.rows(); ++j) {
            double dot = 0;
            for (std::size_t k = 0; k < gallery.cols(); ++k) dot += queries.at(i, k) * gallery.at(j, k);
            const double den = qn * gnorm[j];
            scores[j] = den > 0 ? dot / den : 0.0;
        }
        sum += average_precision(scores, relevance[i]);
        ++r.evaluated;
    }
    r.map = r.evaluated ? sum / static_cast<double>(r.evaluated) : 0.0;
    return r;
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    for (const auto& [k, v] : echo) os << "# " << k << '=' << v << '\n';
    os << "name,metric,value,delta\n";
    for (const auto& r : rows) {
        os << r.name << ',' << r.metric << ',' << fmt(r.value) << ',' << (r.delta ? fmt(*r.delta) : std::string()) << '\n';
    }
    return os.str();
}

std::string EvalReport::to_table() const {
    std::size_t wn = 4, wm = 6;
    for (const auto& r : rows) {
        wn = std::max(wn, r.name.size());
        wm = std::max(wm, r.metric.size());
    }
    std::ostringstream os;
    auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - s.size(), ' '); };
    os << pad("name", wn) << "  " << pad("metric", wm) << "  value     delta\n";
    for (const auto& r : rows) {
        os << pad(r.name, wn) << "  " << pad(r.metric, wm) << "  " << fmt(r.value);
        if (r.delta) os << "  " << (*r.delta >= 0 ? "+" : "") << fmt(*r.delta);
        os << '\n';
    }
    return os.str();
}

}  // namespace fungi
