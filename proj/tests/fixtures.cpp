#include "fixtures.hpp"

namespace mint::testing {

FieldSpec categorical_field(int id, std::string name, int cardinality, int screen) {
  FieldSpec f;
  f.id = id;
  f.name = std::move(name);
  f.kind = CategoricalKind{cardinality};
  f.screen_id = screen;
  return f;
}

FieldSpec scalar_field(int id, std::string name, double p10, double p50, double p90, int screen) {
  FieldSpec f;
  f.id = id;
  f.name = std::move(name);
  f.kind = ScalarKind{p50, p10, p50, p90};
  f.screen_id = screen;
  return f;
}

MetadataSchema yes_no_scalar_schema() {
  return MetadataSchema({categorical_field(0, "yes_no", 2), scalar_field(1, "age", 20, 40, 60, 1)});
}

Case simple_case(int64_t id, int n_images, int dim, int label) {
  Case c;
  c.case_id = id;
  c.label = label;
  for (int i = 0; i < n_images; ++i) {
    CaseImage im;
    im.view = ViewType::Near;
    im.embedding.assign(static_cast<size_t>(dim), 0.1 * (i + 1));
    c.images.push_back(im);
  }
  return c;
}

const World& small_world() {
  static const World w = [] {
    World w;
    auto g = GeneratorConfig::defaults();
    g.n_train = 800;
    g.n_val = 300;
    g.n_test = 300;
    g.seed = 7;
    w.data = generate(g);
    ModelConfig mc;
    mc.steps = 1500;
    mc.seed = 7;
    auto r = train(w.data.train, w.data.schema, mc, w.data.val);
    w.model = std::make_unique<MlpClassifier>(r.model, w.data.schema);
    w.ivm = train_image_value_model(w.data.val, *w.model, w.data.schema, 7);
    return w;
  }();
  return w;
}

const World& default_world() {
  static const World w = [] {
    World w;
    auto g = GeneratorConfig::defaults();
    w.data = generate(g);
    ModelConfig mc;
    mc.seed = g.seed;
    auto r = train(w.data.train, w.data.schema, mc, w.data.val);
    w.model = std::make_unique<MlpClassifier>(r.model, w.data.schema);
    w.ivm = train_image_value_model(w.data.val, *w.model, w.data.schema, g.seed);
    return w;
  }();
  return w;
}

}  // namespace mint::testing
