#pragma once

// Umbrella header.

#include "agree/attention.hpp"
#include "agree/core.hpp"
#include "agree/evaluation.hpp"
#include "agree/io.hpp"
#include "agree/late_interaction.hpp"
#include "agree/objectives.hpp"
#include "agree/planted.hpp"
#include "agree/trainer.hpp"
