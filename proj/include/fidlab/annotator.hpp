#pragma once

#include "fidlab/environments.hpp"
#include "fidlab/train.hpp"

namespace fidlab {

// Trains desk-scale FiD annotators for the relevance-annotation protocol.
// Contexts are drawn from the unlabeled passage list (one answer-bearing
// passage is always included so the task stays extractive); the Pos setting
// samples answer-bearing passages only. The returned predictor runs the
// trained model on a single-passage context.
struct AnnotatorOptions {
    ModelConfig model;
    Vocab vocab;
    TrainHyperparams hp;
    uint64_t seed = 0;
    int ctx_size = 6;
    // When set, the annotator only counts a passage as relevant if both the
    // All-trained and Pos-trained models reproduce a gold answer.
    bool dual_setting = false;
    EmConfig em;
};

AnnotatorTrainer make_fid_annotator_trainer(const AnnotatorOptions& opts);

}  // namespace fidlab
