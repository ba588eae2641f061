/**
 * Copyright 2026 The FedRDN Simulator Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include "fedrdn/augmentation.hpp"
#include "fedrdn/autodiff.hpp"
#include "fedrdn/config.hpp"
#include "fedrdn/datasets.hpp"
#include "fedrdn/errors.hpp"
#include "fedrdn/federation.hpp"
#include "fedrdn/model.hpp"
#include "fedrdn/parameters.hpp"
#include "fedrdn/report.hpp"
#include "fedrdn/rng.hpp"
#include "fedrdn/stats_protocol.hpp"
#include "fedrdn/tensor.hpp"
