#include "widecorrect/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "widecorrect/errors.hpp"

namespace widecorrect {

namespace {

double sign(double v) { return (v > 0.0) - (v < 0.0); }

void check_pair(const char* op, const FlowMap& pred, const FlowMap& ref, const WeightMask& m) {
    if (!pred.same_shape(ref) || m.height != pred.height || m.width != pred.width) {
        throw InvalidArgument(std::string(op) + ": shape mismatch");
    }
}

void check_grad(const char* op, const Planes<double>& like, Planes<double>* grad) {
    if (grad && !grad->same_shape(like)) throw InvalidArgument(std::string(op) + ": gradient shape mismatch");
}

}  // namespace

void LossWeights::validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0) || !(lambda_rc >= 0.0)) {
        throw InvalidArgument("LossWeights: lambdas must be non-negative");
    }
    if (!(delta > 0.0)) throw InvalidArgument("LossWeights: delta must be positive");
    if (!(w_bg > 0.0) || w_face < w_bg) throw InvalidArgument("LossWeights: need w_face >= w_bg > 0");
}

double loss_m1(const FlowMap& pred, const FlowMap& ref, const WeightMask& m, FlowMap* dpred, double scale) {
    check_pair("loss_m1", pred, ref, m);
    check_grad("loss_m1", pred, dpred);
    const std::size_t hw = pred.plane_size();
    const double inv = 1.0 / static_cast<double>(2 * hw);
    double sum = 0.0;
    for (int c = 0; c < 2; ++c) {
        for (std::size_t i = 0; i < hw; ++i) {
            const double r = pred.data[c * hw + i] - ref.data[c * hw + i];
            sum += std::abs(r) * m.data[i];
            if (dpred) dpred->data[c * hw + i] += scale * inv * sign(r) * m.data[i];
        }
    }
    return sum * inv;
}

double loss_ms(const FlowMap& pred, const FlowMap& ref, const WeightMask& m, FlowMap* dpred, double scale) {
    check_pair("loss_ms", pred, ref, m);
    check_grad("loss_ms", pred, dpred);
    const SobelResponse sp = sobel(pred), sr = sobel(ref);
    const std::size_t hw = pred.plane_size();
    const double inv = 1.0 / static_cast<double>(2 * hw);
    double sum = 0.0;
    Planes<double> ux(2, pred.height, pred.width), uy(2, pred.height, pred.width);
    for (int c = 0; c < 2; ++c) {
        for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t k = c * hw + i;
            const double rx = sp.gx.data[k] - sr.gx.data[k];
            const double ry = sp.gy.data[k] - sr.gy.data[k];
            sum += (std::abs(rx) + std::abs(ry)) * m.data[i];
            ux.data[k] = scale * inv * sign(rx) * m.data[i];
            uy.data[k] = scale * inv * sign(ry) * m.data[i];
        }
    }
    if (dpred) {
        const Planes<double> g = sobel_adjoint(ux, uy);
        for (std::size_t k = 0; k < g.data.size(); ++k) dpred->data[k] += g.data[k];
    }
    return sum * inv;
}

double loss_ce(const SegLogits& logits, const SegMask& target, SegLogits* dlogits, double scale) {
    if (logits.channels != 6 || target.height != logits.height || target.width != logits.width) {
        throw InvalidArgument("loss_ce: shape mismatch");
    }
    check_grad("loss_ce", logits, dlogits);
    const std::size_t hw = logits.plane_size();
    const double inv = 1.0 / static_cast<double>(2 * hw);
    double sum = 0.0;
    for (int g = 0; g < 2; ++g) {
        for (std::size_t i = 0; i < hw; ++i) {
            const int t = target.data[g * hw + i];
            if (t > 2) throw InvalidArgument("loss_ce: target class " + std::to_string(t) + " outside {0,1,2}");
            double z[3];
            for (int k = 0; k < 3; ++k) z[k] = logits.data[(g * 3 + k) * hw + i];
            const double mx = std::max({z[0], z[1], z[2]});
            double e[3], denom = 0.0;
            for (int k = 0; k < 3; ++k) {
                e[k] = std::exp(z[k] - mx);
                denom += e[k];
            }
            sum += std::log(denom) + mx - z[t];
            if (dlogits) {
                for (int k = 0; k < 3; ++k) {
                    dlogits->data[(g * 3 + k) * hw + i] += scale * inv * (e[k] / denom - (k == t ? 1.0 : 0.0));
                }
            }
        }
    }
    return sum * inv;
}

SupervisedLoss loss_supervised(const FlowMap& pred, const SegLogits& logits, const FlowMap& gt,
                               const BinaryMask& face_mask, const LossWeights& w, FlowMap* dflow,
                               SegLogits* dseg) {
    w.validate();
    const WeightMask m = make_weight_mask(face_mask, w.w_face, w.w_bg);
    SupervisedLoss out;
    out.m1 = loss_m1(pred, gt, m, dflow, 1.0);
    out.ms = loss_ms(pred, gt, m, dflow, w.lambda1);
    out.ce = loss_ce(logits, flow_to_seg(gt, w.delta), dseg, w.lambda2);
    out.total = out.m1 + w.lambda1 * out.ms + w.lambda2 * out.ce;
    return out;
}

SupervisedLoss loss_flow_only(const FlowMap& pred, const FlowMap& gt, const BinaryMask& face_mask,
                              const LossWeights& w, FlowMap* dflow) {
    w.validate();
    const WeightMask m = make_weight_mask(face_mask, w.w_face, w.w_bg);
    SupervisedLoss out;
    out.m1 = loss_m1(pred, gt, m, dflow, 1.0);
    out.ms = loss_ms(pred, gt, m, dflow, w.lambda1);
    out.total = out.m1 + w.lambda1 * out.ms;
    return out;
}

UnsupervisedLoss loss_unsupervised(const FlowMap& flow1, const FlowMap& flow2, const SegLogits& logits1,
                                   const SegLogits& logits2, const LossWeights& w,
                                   const UnsupervisedGrads& grads, UnsupervisedTerms terms) {
    w.validate();
    if (!flow1.same_shape(flow2) || !logits1.same_shape(logits2)) {
        throw InvalidArgument("loss_unsupervised: branch shapes differ");
    }
    UnsupervisedLoss out;
    if (terms.rc) {
        const WeightMask ones(flow1.height, flow1.width, 1.0);
        // d/dF2 of |F1 - F2| is the negation of d/dF1, so the F2 side reuses the
        // same terms with the arguments swapped.
        const double m1 = loss_m1(flow1, flow2, ones, grads.dflow1, 1.0);
        const double ms = loss_ms(flow1, flow2, ones, grads.dflow1, w.lambda_rc);
        if (grads.dflow2) {
            loss_m1(flow2, flow1, ones, grads.dflow2, 1.0);
            loss_ms(flow2, flow1, ones, grads.dflow2, w.lambda_rc);
        }
        out.rc = m1 + w.lambda_rc * ms;
    }
    if (terms.drc) {
        out.drc1 = loss_ce(logits1, flow_to_seg(flow1, w.delta), grads.dseg1, 1.0);
        out.drc2 = loss_ce(logits2, flow_to_seg(flow2, w.delta), grads.dseg2, 1.0);
    }
    out.total = out.rc + out.drc1 + out.drc2;
    return out;
}

}  // namespace widecorrect
