// A small classifier trained once per test binary on the synthetic set.
#ifndef HWNAS_TESTS_TRAINED_HPP
#define HWNAS_TESTS_TRAINED_HPP

#include "hwnas/dataset.hpp"
#include "hwnas/nnengine.hpp"

namespace hwnas::fixtures {

struct TrainedModel {
    ArchGraph graph;
    WeightStore weights;
    Dataset train_set;
    Dataset test_set;
};

/// conv(16, pool) -> conv(24, pool) -> conv(32) -> head, 6 epochs on 1000 samples.
inline const TrainedModel& trained_model()
{
    static const TrainedModel model = [] {
        TrainedModel m;
        GraphBuilder b(16, 16, 1);
        NodeId a = b.conv(b.input(), 3, 16, true, true, true);
        NodeId c = b.conv(a, 3, 24, true, true, true);
        NodeId d = b.conv(c, 3, 32);
        m.graph = b.build(b.head(d, kSyntheticClasses));
        m.train_set = make_synthetic(1000, 101);
        m.test_set = make_synthetic(500, 202);
        Rng rng(7);
        TrainConfig cfg;
        cfg.epochs = 6;
        cfg.learning_rate = 0.05;
        cfg.seed = 11;
        m.weights = train(m.graph, init_weights(m.graph, rng), m.train_set, m.test_set, cfg).weights;
        return m;
    }();
    return model;
}

} // namespace hwnas::fixtures

#endif
