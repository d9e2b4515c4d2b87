// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "tgr/tensor.hpp"
#include "tgr/io.hpp"
#include "tgr/parallel.hpp"
#include "tgr/vit.hpp"
#include "tgr/attack.hpp"
#include "tgr/config.hpp"
#include "tgr/zoo.hpp"
#include "tgr/eval.hpp"
