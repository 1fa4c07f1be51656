#pragma once

#include "calldet/audio.hpp"
#include "calldet/classes.hpp"
#include "calldet/classifier.hpp"
#include "calldet/decoder.hpp"
#include "calldet/detector.hpp"
#include "calldet/errors.hpp"
#include "calldet/features.hpp"
#include "calldet/metrics.hpp"
#include "calldet/nnet.hpp"
#include "calldet/persistence.hpp"
#include "calldet/rng.hpp"
#include "calldet/synth.hpp"
#include "calldet/util.hpp"
