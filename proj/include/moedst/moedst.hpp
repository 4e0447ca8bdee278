#pragma once

#include "moedst/autodiff.hpp"
#include "moedst/checkpoint.hpp"
#include "moedst/combiner.hpp"
#include "moedst/data.hpp"
#include "moedst/datagen.hpp"
#include "moedst/divider.hpp"
#include "moedst/experiment.hpp"
#include "moedst/metrics.hpp"
#include "moedst/model.hpp"
#include "moedst/rng.hpp"
#include "moedst/tensor.hpp"
#include "moedst/threading.hpp"
#include "moedst/trainer.hpp"
#include "moedst/vocab.hpp"
