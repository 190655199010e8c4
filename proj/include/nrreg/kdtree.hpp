#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <vector>

namespace nrreg {

/// A neighbor candidate. Ordered by squared distance, ties broken by lowest index.
struct Neighbor {
    double dist2 = std::numeric_limits<double>::infinity();
    int index = -1;

    friend bool operator<(const Neighbor& a, const Neighbor& b) {
        return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
    }
};

/// Exact static kd-tree over the columns of a 3xN matrix.
///
/// Queries are exact and deterministic: equal distances resolve to the lowest
/// point index, so the result never depends on tree layout.
class KdTree {
public:
    explicit KdTree(const Eigen::Matrix3Xd& points, int leaf_size = 8)
        : points_(points), leaf_size_(std::max(1, leaf_size)) {
        order_.resize(points_.cols());
        std::iota(order_.begin(), order_.end(), 0);
        if (!order_.empty()) {
            nodes_.reserve(2 * order_.size() / leaf_size_ + 2);
            build(0, static_cast<int>(order_.size()));
        }
    }

    int size() const { return static_cast<int>(points_.cols()); }

    /// Nearest point to `query`; index -1 when the tree is empty.
    Neighbor nearest(const Eigen::Vector3d& query) const {
        Neighbor best;
        if (!nodes_.empty()) nearest_impl(0, query, best);
        return best;
    }

    /// The k nearest points to `query`, sorted ascending. `exclude` (if >= 0) is skipped.
    std::vector<Neighbor> knn(const Eigen::Vector3d& query, int k, int exclude = -1) const {
        std::priority_queue<Neighbor> heap;  // max-heap on (dist2, index)
        if (k > 0 && !nodes_.empty()) knn_impl(0, query, k, exclude, heap);
        std::vector<Neighbor> out(heap.size());
        for (auto it = out.rbegin(); it != out.rend(); ++it) {
            *it = heap.top();
            heap.pop();
        }
        return out;
    }

private:
    struct Node {
        int begin, end;        // range into order_
        int axis = -1;         // -1 for leaves
        double split = 0.0;
        int left = -1, right = -1;
    };

    int build(int begin, int end) {
        const int id = static_cast<int>(nodes_.size());
        nodes_.push_back({begin, end});
        if (end - begin <= leaf_size_) return id;

        Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
        Eigen::Vector3d hi = -lo;
        for (int k = begin; k < end; ++k) {
            lo = lo.cwiseMin(points_.col(order_[k]));
            hi = hi.cwiseMax(points_.col(order_[k]));
        }
        int axis = 0;
        (hi - lo).maxCoeff(&axis);
        if (hi[axis] - lo[axis] <= 0.0) return id;  // all coincident: keep as leaf

        const int mid = begin + (end - begin) / 2;
        std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                         [&](int a, int b) {
                             const double pa = points_(axis, a), pb = points_(axis, b);
                             return pa < pb || (pa == pb && a < b);
                         });
        const double split = points_(axis, order_[mid]);
        const int left = build(begin, mid);
        const int right = build(mid, end);
        Node& n = nodes_[id];
        n.axis = axis;
        n.split = split;
        n.left = left;
        n.right = right;
        return id;
    }

    void nearest_impl(int id, const Eigen::Vector3d& q, Neighbor& best) const {
        const Node& n = nodes_[id];
        if (n.axis < 0) {
            for (int k = n.begin; k < n.end; ++k) {
                const int idx = order_[k];
                const Neighbor cand{(points_.col(idx) - q).squaredNorm(), idx};
                if (cand < best) best = cand;
            }
            return;
        }
        const double diff = q[n.axis] - n.split;
        const int near = diff < 0 ? n.left : n.right;
        const int far = diff < 0 ? n.right : n.left;
        nearest_impl(near, q, best);
        if (diff * diff <= best.dist2) nearest_impl(far, q, best);
    }

    void knn_impl(int id, const Eigen::Vector3d& q, int k, int exclude,
                  std::priority_queue<Neighbor>& heap) const {
        const Node& n = nodes_[id];
        if (n.axis < 0) {
            for (int t = n.begin; t < n.end; ++t) {
                const int idx = order_[t];
                if (idx == exclude) continue;
                const Neighbor cand{(points_.col(idx) - q).squaredNorm(), idx};
                if (static_cast<int>(heap.size()) < k) {
                    heap.push(cand);
                } else if (cand < heap.top()) {
                    heap.pop();
                    heap.push(cand);
                }
            }
            return;
        }
        const double diff = q[n.axis] - n.split;
        const int near = diff < 0 ? n.left : n.right;
        const int far = diff < 0 ? n.right : n.left;
        knn_impl(near, q, k, exclude, heap);
        if (static_cast<int>(heap.size()) < k || diff * diff <= heap.top().dist2)
            knn_impl(far, q, k, exclude, heap);
    }

    Eigen::Matrix3Xd points_;
    int leaf_size_;
    std::vector<int> order_;
    std::vector<Node> nodes_;
};

}  // namespace nrreg
