#pragma once

// Training objectives over network outputs. Every loss is a mean over pixels
// and flow components; when a gradient target is supplied the loss adds
// scale * dL/d(input) into it.

#include "widecorrect/geometry.hpp"
#include "widecorrect/msunet.hpp"

namespace widecorrect {

struct LossWeights {
    double lambda1 = 10.0;   // sobel term of the supervised loss
    double lambda2 = 10.0;   // segmentation term of the supervised loss
    double lambda_rc = 10.0; // sobel term of the regression-consistency loss
    double delta = kDefaultDelta;
    double w_face = kDefaultFaceWeight;
    double w_bg = kDefaultBackgroundWeight;

    void validate() const;
};

double loss_m1(const FlowMap& pred, const FlowMap& ref, const WeightMask& m,
               FlowMap* dpred = nullptr, double scale = 1.0);

double loss_ms(const FlowMap& pred, const FlowMap& ref, const WeightMask& m,
               FlowMap* dpred = nullptr, double scale = 1.0);

double loss_ce(const SegLogits& logits, const SegMask& target, SegLogits* dlogits = nullptr,
               double scale = 1.0);

struct SupervisedLoss {
    double m1 = 0.0;
    double ms = 0.0;
    double ce = 0.0;
    double total = 0.0;
};

/// L_m1 + lambda1 L_ms + lambda2 L_ce against flow_to_seg(gt) and the weighted face mask.
SupervisedLoss loss_supervised(const FlowMap& pred, const SegLogits& logits, const FlowMap& gt,
                               const BinaryMask& face_mask, const LossWeights& w,
                               FlowMap* dflow = nullptr, SegLogits* dseg = nullptr);

/// Flow-only objective used while pretraining: L_m1 + lambda1 L_ms.
SupervisedLoss loss_flow_only(const FlowMap& pred, const FlowMap& gt, const BinaryMask& face_mask,
                              const LossWeights& w, FlowMap* dflow = nullptr);

struct UnsupervisedLoss {
    double rc = 0.0;   // L_m1(F1, F2) + lambda_rc L_ms(F1, F2)
    double drc1 = 0.0; // CE(logits1, seg(F1))
    double drc2 = 0.0; // CE(logits2, seg(F2))
    double total = 0.0;
};

struct UnsupervisedGrads {
    FlowMap* dflow1 = nullptr;
    FlowMap* dflow2 = nullptr;
    SegLogits* dseg1 = nullptr;
    SegLogits* dseg2 = nullptr;
};

struct UnsupervisedTerms {
    bool rc = true;
    bool drc = true;
};

/// Pseudo-labels seg(F_i) are constants: no gradient flows through the thresholding.
UnsupervisedLoss loss_unsupervised(const FlowMap& flow1, const FlowMap& flow2, const SegLogits& logits1,
                                   const SegLogits& logits2, const LossWeights& w,
                                   const UnsupervisedGrads& grads = {}, UnsupervisedTerms terms = {});

}  // namespace widecorrect
